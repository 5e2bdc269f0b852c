//! Offline dataset construction.
//!
//! A scripted stochastic insertion policy produces trajectories with a wide
//! spread of returns. Forces are augmented with a per-trajectory scale and
//! additive noise, undiscounted returns-to-go are attached, and every step is
//! turned into a training row whose gain-tuner and force-planner history
//! windows are built on demand from the referenced trajectory.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Pose, Twist, Vector, Wrench};
use crate::envsim::{axis_noise_std, Action, Env, EnvState, AXIS_THETA, AXIS_X, AXIS_Z, PLANAR_DOF};
use crate::math;
use crate::{rng_from_seed, Error, Result, Rng};

/// Provenance of a trajectory.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub preset: String,
    pub policy: String,
    /// Force scale of the augmentation that produced this copy, if any.
    #[serde(default)]
    pub augmentation: Option<f64>,
}

/// Time-indexed record of one episode. Step `t` holds the observation before
/// the action (`x_t`, `v_t`, `f_t`), the action (`dx_t`, `k_t`) and the reward
/// received for it.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub x: Vec<Pose>,
    pub v: Vec<Twist>,
    pub f: Vec<Wrench>,
    pub dx: Vec<Pose>,
    pub k: Vec<Vector>,
    pub r: Vec<f64>,
    pub success: bool,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn push(&mut self, state: &EnvState, action: &Action, reward: f64) {
        self.x.push(state.x);
        self.v.push(state.v);
        self.f.push(state.f);
        self.dx.push(action.dx);
        self.k.push(action.k);
        self.r.push(reward);
    }

    pub fn episode_return(&self) -> f64 {
        self.r.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.len();
        let lens = [self.v.len(), self.f.len(), self.dx.len(), self.k.len(), self.r.len()];
        if let Some(&got) = lens.iter().find(|&&l| l != n) {
            return Err(Error::DimensionMismatch { expected: n, got });
        }
        if n == 0 {
            return Err(Error::usage("empty trajectory"));
        }
        if self.r.iter().any(|r| !(*r <= 0.0)) {
            return Err(Error::usage("rewards must be non-positive"));
        }
        Ok(())
    }
}

/// Undiscounted suffix sums `R_t = Σ_{t' ≥ t} r_t'`.
pub fn returns_to_go(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::usage("returns-to-go of an empty reward sequence"));
    }
    let mut out = alloc::vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    Ok(out)
}

/// Force augmentation parameters.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForceAugment {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Standard deviation of the additive noise (N, per force axis and step);
    /// torques get the same force acting at [`crate::envsim::NOISE_LEVER_ARM`].
    pub noise_std: f64,
    /// Augmented copies generated per raw trajectory.
    pub copies: usize,
}

impl Default for ForceAugment {
    fn default() -> Self {
        ForceAugment { scale_min: 0.4, scale_max: 1.4, noise_std: 1.0, copies: 3 }
    }
}

impl ForceAugment {
    pub fn sample_scale(&self, rng: &mut Rng) -> f64 {
        if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..self.scale_max)
        } else {
            self.scale_min
        }
    }
}

/// Copy of `traj` with `f_t ← s·f_t + ε_t`, `s` drawn once per trajectory.
pub fn augment_force(traj: &Trajectory, aug: &ForceAugment, rng: &mut Rng) -> Trajectory {
    let scale = aug.sample_scale(rng);
    augment_force_with(traj, scale, aug.noise_std, rng)
}

/// [`augment_force`] with an explicit scale.
pub fn augment_force_with(traj: &Trajectory, scale: f64, noise_std: f64, rng: &mut Rng) -> Trajectory {
    let mut out = traj.clone();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let std = axis_noise_std(noise_std.max(0.0));
    for f in out.f.iter_mut() {
        for i in 0..f.dof() {
            let eps = if noise_std > 0.0 { std.get(i).copied().unwrap_or(noise_std) * noise.sample(rng) } else { 0.0 };
            f[i] = scale * f[i] + eps;
        }
    }
    out.meta.augmentation = Some(scale);
    out
}

/// One history slot of the gain-tuner window: `(x_i, ẋ_i, Δx_i, k_i, f^d_{i+1})`.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct GtSlot {
    pub x: Pose,
    pub v: Twist,
    pub dx: Pose,
    pub k: Vector,
    pub f_next: Wrench,
}

/// One history slot of the force-planner window: `(x_i, ẋ_i, f_i, Δx_i, f^d_{i+1}, R_i)`.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct FpSlot {
    pub x: Pose,
    pub v: Twist,
    pub f: Wrench,
    pub dx: Pose,
    pub f_next: Wrench,
    pub ret: f64,
}

/// Fixed-length history, oldest first. Slots before the episode start are
/// zero-filled and marked invalid.
#[derive(Clone, PartialEq, Debug)]
pub struct Window<S> {
    pub slots: Vec<S>,
    pub mask: Vec<bool>,
}

impl<S> Window<S> {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn valid(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

pub type GtWindow = Window<GtSlot>;
pub type FpWindow = Window<FpSlot>;

impl GtSlot {
    pub fn zeros(dof: usize) -> Self {
        GtSlot {
            x: Pose::zeros(dof),
            v: Twist::zeros(dof),
            dx: Pose::zeros(dof),
            k: Vector::zeros(dof),
            f_next: Wrench::zeros(dof),
        }
    }
}

impl FpSlot {
    pub fn zeros(dof: usize) -> Self {
        FpSlot {
            x: Pose::zeros(dof),
            v: Twist::zeros(dof),
            f: Wrench::zeros(dof),
            dx: Pose::zeros(dof),
            f_next: Wrench::zeros(dof),
            ret: 0.0,
        }
    }
}

/// Windows for step `t` covering steps `t-H .. t-1`.
///
/// The force slot of step `i` holds the trajectory's observed `f_{i+1}`.
/// `returns[i]` supplies `R_i` (returns-to-go in training, the decremented
/// conditioning return at deployment). Only steps before `t` are read, plus
/// `f_t`, so a trajectory whose last entry is a placeholder for the current
/// step is a valid input.
pub fn build_windows(traj: &Trajectory, returns: &[f64], t: usize, h: usize) -> Result<(GtWindow, FpWindow)> {
    let n = traj.len();
    if t >= n {
        return Err(Error::usage(alloc::format!("window index {t} outside trajectory of length {n}")));
    }
    if returns.len() < t {
        return Err(Error::DimensionMismatch { expected: t, got: returns.len() });
    }
    let dof = traj.x[0].dof();
    let mut gt = Window { slots: Vec::with_capacity(h), mask: Vec::with_capacity(h) };
    let mut fp = Window { slots: Vec::with_capacity(h), mask: Vec::with_capacity(h) };
    for j in 0..h {
        // Slot j covers step t - h + j.
        match (t + j).checked_sub(h) {
            Some(i) => {
                gt.slots.push(GtSlot {
                    x: traj.x[i],
                    v: traj.v[i],
                    dx: traj.dx[i],
                    k: traj.k[i],
                    f_next: traj.f[i + 1],
                });
                fp.slots.push(FpSlot {
                    x: traj.x[i],
                    v: traj.v[i],
                    f: traj.f[i],
                    dx: traj.dx[i],
                    f_next: traj.f[i + 1],
                    ret: returns[i],
                });
                gt.mask.push(true);
                fp.mask.push(true);
            }
            None => {
                gt.slots.push(GtSlot::zeros(dof));
                fp.slots.push(FpSlot::zeros(dof));
                gt.mask.push(false);
                fp.mask.push(false);
            }
        }
    }
    Ok((gt, fp))
}

/// One supervised example: step `t` of trajectory `traj`.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct DatasetRow {
    pub traj: usize,
    pub t: usize,
    /// Return-to-go `R_t`.
    pub ret: f64,
    /// Supervision target `f_{t+1}` from the same trajectory.
    pub f_next: Wrench,
}

/// Trajectories plus one row per step that has a successor force.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub returns: Vec<Vec<f64>>,
    pub rows: Vec<DatasetRow>,
}

/// Result of [`build_dataset`]; `skipped` lists trajectories too short to yield a row.
#[derive(Clone, Debug)]
pub struct BuiltDataset {
    pub dataset: Dataset,
    pub skipped: Vec<usize>,
}

/// Build rows for `t in 0..T-1` of every trajectory of length ≥ 2.
pub fn build_dataset(trajs: Vec<Trajectory>) -> Result<BuiltDataset> {
    let mut dataset = Dataset::default();
    let mut skipped = Vec::new();
    for (i, traj) in trajs.into_iter().enumerate() {
        traj.validate()?;
        if traj.len() < 2 {
            skipped.push(i);
            continue;
        }
        let idx = dataset.trajectories.len();
        let rtg = returns_to_go(&traj.r)?;
        for t in 0..traj.len() - 1 {
            dataset.rows.push(DatasetRow { traj: idx, t, ret: rtg[t], f_next: traj.f[t + 1] });
        }
        dataset.returns.push(rtg);
        dataset.trajectories.push(traj);
    }
    Ok(BuiltDataset { dataset, skipped })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn windows(&self, row: &DatasetRow, h: usize) -> Result<(GtWindow, FpWindow)> {
        build_windows(&self.trajectories[row.traj], &self.returns[row.traj], row.t, h)
    }

    /// Best (largest) episode return in the dataset.
    pub fn best_return(&self) -> Option<f64> {
        self.returns.iter().filter_map(|r| r.first().copied()).reduce(f64::max)
    }

    /// Split trajectories into (train, held-out) by index: every `every`-th goes to held-out.
    pub fn split_every(&self, every: usize) -> (Dataset, Dataset) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (i, t) in self.trajectories.iter().enumerate() {
            if every > 0 && i % every == every - 1 {
                held.push(t.clone());
            } else {
                train.push(t.clone());
            }
        }
        let build = |v| build_dataset(v).map(|b| b.dataset).unwrap_or_default();
        (build(train), build(held))
    }
}

/// A decision made at one step.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct Decision {
    pub action: Action,
    /// Planned next force, for policies that plan one.
    pub planned_force: Option<Wrench>,
    /// Reference force for tracking metrics when the policy itself does not plan.
    pub reference_force: Option<Wrench>,
    /// Conditioning return-to-go used at this step.
    pub conditioning_return: Option<f64>,
}

impl From<Action> for Decision {
    fn from(action: Action) -> Self {
        Decision { action, planned_force: None, reference_force: None, conditioning_return: None }
    }
}

/// Anything that can drive the environment one decision at a time.
pub trait Policy {
    fn begin_episode(&mut self, seed: u64) -> Result<()>;

    /// `history` holds the completed steps `0..t`; `state` is the observation at `t`.
    fn act(&mut self, history: &Trajectory, state: &EnvState) -> Result<Decision>;
}

/// Per-step log next to the trajectory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeLog {
    pub decisions: Vec<Decision>,
    /// Reported force after the final step (`f_T`).
    pub final_force: Option<Wrench>,
}

/// Run one episode to completion.
pub fn run_episode(env: &mut Env, policy: &mut dyn Policy, seed: u64) -> Result<(Trajectory, EpisodeLog)> {
    let mut state = env.reset(seed);
    policy.begin_episode(seed)?;
    let mut traj = Trajectory {
        meta: TrajectoryMeta { seed, preset: env.preset().name.clone(), ..TrajectoryMeta::default() },
        ..Trajectory::default()
    };
    let mut log = EpisodeLog::default();
    while !state.done {
        let decision = policy.act(&traj, &state)?;
        let (next, reward) = env.step(&decision.action)?;
        let executed = env.task().clamp_action(&decision.action);
        traj.push(&state, &executed, reward);
        log.decisions.push(Decision { action: executed, ..decision });
        state = next;
    }
    traj.success = state.success;
    log.final_force = Some(state.f);
    Ok((traj, log))
}

/// Parameters of the scripted collection policy.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedConfig {
    /// |f_z| above this ends the free-space descent (N).
    pub contact_threshold: f64,
    /// |τ| above this steers the lateral search (N·m).
    pub torque_threshold: f64,
    /// Tip height below the surface that counts as having entered the hole (m).
    pub entry_depth: f64,
    /// Free-space descent per step (m).
    pub descend_step: [f64; 2],
    /// Lateral search step (m).
    pub search_step: [f64; 2],
    /// Downward setpoint bias per search step (m).
    pub push_bias: [f64; 2],
    /// Descent per step once inside the hole (m).
    pub insert_step: [f64; 2],
    /// Per-episode stiffness base range (N/m), sampled log-uniformly.
    pub k_base: [f64; 2],
    /// Log-normal spread of the per-step stiffness around the base.
    pub k_jitter: f64,
    /// Exploration noise as a fraction of the action bound.
    pub noise: f64,
    /// Probability that an episode runs a deliberately poor strategy.
    pub failure_rate: f64,
}

impl Default for ScriptedConfig {
    fn default() -> Self {
        ScriptedConfig {
            contact_threshold: 1.5,
            torque_threshold: 0.01,
            entry_depth: 5e-4,
            descend_step: [0.001, 0.002],
            search_step: [2e-4, 1e-3],
            push_bias: [5e-5, 4e-4],
            insert_step: [5e-4, 2e-3],
            k_base: [60.0, 1000.0],
            k_jitter: 0.5,
            noise: 0.15,
            failure_rate: 0.4,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    Descend,
    Search,
    Insert,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Sabotage {
    None,
    /// Pushes hard with stiff lateral gains.
    Heavy,
    /// Ignores the torque cue and wanders.
    Blind,
}

#[derive(Clone, Copy, Debug)]
struct EpisodePlan {
    k_base: [f64; PLANAR_DOF],
    descend: f64,
    search: f64,
    bias: f64,
    insert: f64,
    comply: f64,
    sabotage: Sabotage,
}

/// Three-phase stochastic insertion controller: descend until contact, search
/// laterally (torque-guided, with a downward bias), then push in while
/// complying to lateral wall forces.
#[derive(Clone, Debug)]
pub struct ScriptedPolicy {
    pub config: ScriptedConfig,
    dx_max: [f64; PLANAR_DOF],
    k_range: [f64; 2],
    rng: Rng,
    phase: Phase,
    plan: EpisodePlan,
    sweep_dir: f64,
    sweep_count: usize,
    sweep_len: usize,
}

/// Seed of the policy's own RNG for an episode seed.
pub fn policy_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5C21_A7ED
}

impl ScriptedPolicy {
    pub const VERSION: &'static str = "scripted-v1";

    pub fn new(config: ScriptedConfig, task: &crate::envsim::TaskConfig) -> Self {
        ScriptedPolicy {
            config,
            dx_max: task.dx_max,
            k_range: [task.k_min, task.k_max],
            rng: rng_from_seed(0),
            phase: Phase::Descend,
            plan: EpisodePlan {
                k_base: [task.k_max; PLANAR_DOF],
                descend: 0.0,
                search: 0.0,
                bias: 0.0,
                insert: 0.0,
                comply: 0.0,
                sabotage: Sabotage::None,
            },
            sweep_dir: 1.0,
            sweep_count: 0,
            sweep_len: 2,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    fn uniform(&mut self, range: [f64; 2]) -> f64 {
        if range[1] > range[0] {
            self.rng.random_range(range[0]..range[1])
        } else {
            range[0]
        }
    }

    fn gains(&mut self) -> [f64; PLANAR_DOF] {
        let normal = Normal::new(0.0, self.config.k_jitter.max(0.0)).expect("finite jitter");
        let mut k = [0.0; PLANAR_DOF];
        for (i, ki) in k.iter_mut().enumerate() {
            let jitter = if self.config.k_jitter > 0.0 { normal.sample(&mut self.rng) } else { 0.0 };
            *ki = math::clamp(self.plan.k_base[i] * math::exp(jitter), self.k_range[0], self.k_range[1]);
        }
        k
    }

    fn decide(&mut self, state: &EnvState) -> Action {
        let x = &state.x;
        let f = &state.f;
        let z = x[AXIS_Z];
        let theta = x[AXIS_THETA];

        if z < -self.config.entry_depth {
            self.phase = Phase::Insert;
        } else if self.phase == Phase::Insert {
            self.phase = Phase::Search;
        }
        if self.phase == Phase::Descend && f[AXIS_Z].abs() > self.config.contact_threshold {
            self.phase = Phase::Search;
        }

        let k = self.gains();
        let mut dx = [0.0; PLANAR_DOF];
        match self.phase {
            Phase::Descend => {
                dx[AXIS_X] = -0.5 * x[AXIS_X];
                dx[AXIS_Z] = -self.plan.descend;
                dx[AXIS_THETA] = -0.5 * theta;
            }
            Phase::Search => {
                let torque = f[AXIS_THETA];
                let guided = self.plan.sabotage != Sabotage::Blind && torque.abs() > self.config.torque_threshold;
                if guided {
                    self.sweep_dir = -math::signum(torque);
                    self.sweep_count = 0;
                } else {
                    self.sweep_count += 1;
                    if self.sweep_count >= self.sweep_len {
                        self.sweep_dir = -self.sweep_dir;
                        self.sweep_count = 0;
                        self.sweep_len += 2;
                    }
                }
                dx[AXIS_X] = self.sweep_dir * self.plan.search;
                dx[AXIS_Z] = -self.plan.bias;
                dx[AXIS_THETA] = -0.5 * theta;
            }
            Phase::Insert => {
                dx[AXIS_X] = self.plan.comply * f[AXIS_X] / k[AXIS_X];
                dx[AXIS_Z] = -self.plan.insert;
                dx[AXIS_THETA] = self.plan.comply * f[AXIS_THETA] / k[AXIS_THETA] - 0.5 * theta;
            }
        }

        let noise = Normal::new(0.0, self.config.noise.max(0.0)).expect("finite noise");
        for (i, d) in dx.iter_mut().enumerate() {
            let n = if self.config.noise > 0.0 { noise.sample(&mut self.rng) } else { 0.0 };
            *d = math::clamp(*d + n * self.dx_max[i], -self.dx_max[i], self.dx_max[i]);
        }
        Action::new(dx, k)
    }
}

impl Policy for ScriptedPolicy {
    fn begin_episode(&mut self, seed: u64) -> Result<()> {
        self.rng = rng_from_seed(policy_seed(seed));
        self.phase = Phase::Descend;
        self.sweep_dir = if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
        self.sweep_count = 0;
        self.sweep_len = 2;
        let c = self.config;
        let sabotage = if self.rng.random_bool(c.failure_rate.clamp(0.0, 1.0)) {
            if self.rng.random_bool(0.5) { Sabotage::Heavy } else { Sabotage::Blind }
        } else {
            Sabotage::None
        };
        let (lo, hi) = (math::ln(c.k_base[0]), math::ln(c.k_base[1]));
        let mut k_base = [0.0; PLANAR_DOF];
        for kb in k_base.iter_mut() {
            let u = if hi > lo { self.rng.random_range(lo..hi) } else { lo };
            *kb = math::exp(u);
        }
        let mut bias = self.uniform(c.push_bias);
        if sabotage == Sabotage::Heavy {
            bias *= 5.0;
            k_base[AXIS_Z] = self.k_range[1];
        }
        self.plan = EpisodePlan {
            k_base,
            descend: self.uniform(c.descend_step),
            search: self.uniform(c.search_step),
            bias,
            insert: self.uniform(c.insert_step),
            comply: self.uniform([0.3, 1.0]),
            sabotage,
        };
        Ok(())
    }

    fn act(&mut self, _history: &Trajectory, state: &EnvState) -> Result<Decision> {
        Ok(self.decide(state).into())
    }
}

/// Collect one scripted episode per seed.
pub fn collect(env: &mut Env, config: &ScriptedConfig, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<Trajectory>> {
    let mut policy = ScriptedPolicy::new(*config, env.task());
    let mut out = Vec::new();
    for seed in seeds {
        let (mut traj, _) = run_episode(env, &mut policy, seed)?;
        traj.meta.policy = ScriptedPolicy::VERSION.to_string();
        out.push(traj);
    }
    Ok(out)
}

/// Raw trajectories followed by `aug.copies` augmented copies of each, drawn
/// from an RNG seeded with `seed`.
pub fn augment_all(raw: &[Trajectory], aug: &ForceAugment, seed: u64) -> Vec<Trajectory> {
    let mut rng = rng_from_seed(seed);
    let mut out = raw.to_vec();
    for traj in raw {
        for _ in 0..aug.copies {
            out.push(augment_force(traj, aug, &mut rng));
        }
    }
    out
}

/// Summary of a batch of episodes.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct ReturnStats {
    pub episodes: usize,
    pub success_fraction: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn return_stats(trajs: &[Trajectory]) -> ReturnStats {
    let mut rets: Vec<f64> = trajs.iter().map(Trajectory::episode_return).collect();
    rets.sort_by(f64::total_cmp);
    let successes = trajs.iter().filter(|t| t.success).count();
    ReturnStats {
        episodes: trajs.len(),
        success_fraction: if trajs.is_empty() { 0.0 } else { successes as f64 / trajs.len() as f64 },
        min: quantile(&rets, 0.0),
        q25: quantile(&rets, 0.25),
        median: quantile(&rets, 0.5),
        q75: quantile(&rets, 0.75),
        max: quantile(&rets, 1.0),
    }
}
