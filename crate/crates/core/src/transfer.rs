//! Deployment rollouts, baselines and evaluation under environment shift.
//!
//! At every step the force planner reads its window of executed history and
//! the decremented return-to-go, emits a motion increment and the next desired
//! force, and the gain tuner turns that plan into stiffness. Windows are built
//! by [`build_windows`] on the executed trajectory with a placeholder for the
//! current step, so deployment and training share one code path.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datagen::{
    build_dataset, build_windows, run_episode, Dataset, Decision, EpisodeLog, FpWindow, GtWindow, Policy, ScriptedConfig,
    ScriptedPolicy, Trajectory,
};
use crate::dynamics::{Vector, Wrench};
use crate::envsim::{Action, Env, EnvState, TaskConfig, AXIS_Z};
use crate::math;
use crate::seqmodel::{
    fp_forward, gt_forward, joint_forward, train, FeatureStats, Learner, ModelConfig, ModelKind, SeqModel, TrainConfig,
    TrainHooks, TrainReport,
};
use crate::{Error, Result};

/// Steps whose observed force norm is at or below this are free-space noise.
pub const CONTACT_FORCE: f64 = 0.5;

/// Share of the best dataset return used as the default conditioning target.
pub const TARGET_RETURN_FRACTION: f64 = 0.9;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Force planner for motion and desired force, gain tuner for stiffness.
    FpGt,
    /// One model emitting motion and stiffness together.
    JointDt,
    /// Force planner for motion with a constant stiffness.
    FixedGain,
    /// The data-collection policy.
    Scripted,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [PolicyKind::FpGt, PolicyKind::JointDt, PolicyKind::FixedGain, PolicyKind::Scripted];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::FpGt => "fp_gt",
            PolicyKind::JointDt => "joint_dt",
            PolicyKind::FixedGain => "fixed_gain",
            PolicyKind::Scripted => "scripted",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Usage(alloc::format!("unknown policy {name:?}")))
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    /// Multiplier on the planned force before it reaches the gain tuner.
    pub force_scale: f64,
    /// Stiffness on every axis for `fixed_gain` (N/m).
    pub fixed_gain: f64,
    /// Conditioning return at `t = 0`; `None` uses the models' stored default.
    pub target_return: Option<f64>,
    pub scripted: ScriptedConfig,
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec {
            kind: PolicyKind::FpGt,
            force_scale: 1.0,
            fixed_gain: 300.0,
            target_return: None,
            scripted: ScriptedConfig::default(),
        }
    }
}

impl PolicySpec {
    pub fn of(kind: PolicyKind) -> Self {
        PolicySpec { kind, ..Self::default() }
    }
}

/// Trained models available to policies.
#[derive(Clone, Debug, Default)]
pub struct ModelSet {
    pub gt: Option<SeqModel>,
    pub fp: Option<SeqModel>,
    pub joint: Option<SeqModel>,
    /// Default conditioning return when a spec does not set one.
    pub target_return: f64,
}

fn require<'a>(m: &'a Option<SeqModel>, kind: ModelKind, policy: PolicyKind) -> Result<&'a SeqModel> {
    match m {
        Some(m) if m.kind() == kind => Ok(m),
        Some(m) => Err(Error::Usage(alloc::format!("{} needs a {} model, got {}", policy.name(), kind.name(), m.kind().name()))),
        None => Err(Error::Usage(alloc::format!("{} needs a {} model", policy.name(), kind.name()))),
    }
}

/// Default conditioning return: a fraction of the best dataset return.
pub fn default_target_return(dataset: &Dataset) -> Result<f64> {
    dataset
        .best_return()
        .map(|r| TARGET_RETURN_FRACTION * r)
        .ok_or_else(|| Error::usage("dataset has no trajectories"))
}

/// Return-to-go bookkeeping plus the partial trajectory with a placeholder current step.
#[derive(Clone, Debug, Default)]
struct Context {
    target: f64,
    returns: Vec<f64>,
    partial: Trajectory,
}

impl Context {
    /// Advance to step `t = history.len()` and return `(gt_window, fp_window, R_t)`.
    fn windows(&mut self, history: &Trajectory, state: &EnvState, h: usize) -> Result<(GtWindow, FpWindow, f64)> {
        let t = history.len();
        if self.returns.len() != t {
            return Err(Error::usage("policy history out of sync with its return log"));
        }
        let ret = match t {
            0 => self.target,
            _ => self.returns[t - 1] - history.r[t - 1],
        };
        self.returns.push(ret);
        self.partial.clone_from(history);
        let dof = state.x.dof();
        self.partial.push(state, &Action { dx: crate::dynamics::Pose::zeros(dof), k: Vector::zeros(dof) }, 0.0);
        let (gw, fw) = build_windows(&self.partial, &self.returns, t, h)?;
        Ok((gw, fw, ret))
    }
}

/// Planner and tuner composed as at deployment.
#[derive(Clone, Debug)]
pub struct FpGtPolicy {
    fp: SeqModel,
    gt: Option<SeqModel>,
    force_scale: f64,
    fixed_gain: f64,
    ctx: Context,
    trace: Option<Vec<(GtWindow, FpWindow)>>,
}

impl FpGtPolicy {
    pub fn new(fp: SeqModel, gt: SeqModel, force_scale: f64, target_return: f64) -> Result<Self> {
        if gt.config().window != fp.config().window {
            return Err(Error::DimensionMismatch { expected: fp.config().window, got: gt.config().window });
        }
        check_scale(force_scale)?;
        Ok(FpGtPolicy { fp, gt: Some(gt), force_scale, fixed_gain: 0.0, ctx: context(target_return), trace: None })
    }

    /// Planner motion with constant stiffness on every axis.
    pub fn fixed_gain(fp: SeqModel, gain: f64, target_return: f64) -> Result<Self> {
        let cfg = fp.config();
        if !(gain >= cfg.k_min && gain <= cfg.k_max) {
            return Err(Error::InvalidGain { axis: 0, value: gain });
        }
        Ok(FpGtPolicy { fp, gt: None, force_scale: 1.0, fixed_gain: gain, ctx: context(target_return), trace: None })
    }

    /// Keep the windows used at every step of the current episode.
    pub fn record_windows(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn recorded_windows(&self) -> &[(GtWindow, FpWindow)] {
        self.trace.as_deref().unwrap_or(&[])
    }
}

fn context(target: f64) -> Context {
    Context { target, ..Context::default() }
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::usage("desired-force scale must be finite and non-negative"));
    }
    Ok(())
}

impl Policy for FpGtPolicy {
    fn begin_episode(&mut self, _seed: u64) -> Result<()> {
        self.ctx.returns.clear();
        if let Some(t) = &mut self.trace {
            t.clear();
        }
        Ok(())
    }

    fn act(&mut self, history: &Trajectory, state: &EnvState) -> Result<Decision> {
        let (gw, fw, ret) = self.ctx.windows(history, state, self.fp.config().window)?;
        let (dx, planned) = fp_forward(&self.fp, &fw, &state.x, &state.v, &state.f, ret)?;
        let planned = Wrench(planned.0.scale(self.force_scale));
        let k = match &self.gt {
            Some(gt) => gt_forward(gt, &gw, &state.x, &state.v, &dx, &planned)?,
            None => Vector::splat(dx.dof(), self.fixed_gain),
        };
        if let Some(t) = &mut self.trace {
            t.push((gw, fw));
        }
        Ok(Decision { action: Action { dx, k }, planned_force: Some(planned), reference_force: None, conditioning_return: Some(ret) })
    }
}

/// Joint baseline. An optional planner runs in the shadow on the same
/// history to supply a reference force for tracking metrics; it never
/// influences the action.
#[derive(Clone, Debug)]
pub struct JointPolicy {
    joint: SeqModel,
    shadow: Option<SeqModel>,
    ctx: Context,
}

impl JointPolicy {
    pub fn new(joint: SeqModel, shadow: Option<SeqModel>, target_return: f64) -> Result<Self> {
        if let Some(fp) = &shadow {
            if fp.config().window != joint.config().window {
                return Err(Error::DimensionMismatch { expected: joint.config().window, got: fp.config().window });
            }
        }
        Ok(JointPolicy { joint, shadow, ctx: context(target_return) })
    }
}

impl Policy for JointPolicy {
    fn begin_episode(&mut self, _seed: u64) -> Result<()> {
        self.ctx.returns.clear();
        Ok(())
    }

    fn act(&mut self, history: &Trajectory, state: &EnvState) -> Result<Decision> {
        let (gw, fw, ret) = self.ctx.windows(history, state, self.joint.config().window)?;
        let (dx, k) = joint_forward(&self.joint, &gw, &fw, &state.x, &state.v, &state.f, ret)?;
        let reference = match &self.shadow {
            Some(fp) => Some(fp_forward(fp, &fw, &state.x, &state.v, &state.f, ret)?.1),
            None => None,
        };
        Ok(Decision { action: Action { dx, k }, planned_force: None, reference_force: reference, conditioning_return: Some(ret) })
    }
}

/// Instantiate the policy a spec describes.
pub fn make_policy(spec: &PolicySpec, models: &ModelSet, task: &TaskConfig) -> Result<Box<dyn Policy>> {
    let target = spec.target_return.unwrap_or(models.target_return);
    if !target.is_finite() {
        return Err(Error::NonFinite("target return"));
    }
    Ok(match spec.kind {
        PolicyKind::FpGt => {
            let fp = require(&models.fp, ModelKind::ForcePlanner, spec.kind)?;
            let gt = require(&models.gt, ModelKind::GainTuner, spec.kind)?;
            Box::new(FpGtPolicy::new(fp.clone(), gt.clone(), spec.force_scale, target)?)
        }
        PolicyKind::FixedGain => {
            let fp = require(&models.fp, ModelKind::ForcePlanner, spec.kind)?;
            Box::new(FpGtPolicy::fixed_gain(fp.clone(), spec.fixed_gain, target)?)
        }
        PolicyKind::JointDt => {
            let joint = require(&models.joint, ModelKind::Joint, spec.kind)?;
            let shadow = models.fp.as_ref().filter(|m| m.kind() == ModelKind::ForcePlanner).cloned();
            Box::new(JointPolicy::new(joint.clone(), shadow, target)?)
        }
        PolicyKind::Scripted => Box::new(ScriptedPolicy::new(spec.scripted, task)),
    })
}

/// One episode of `spec` on `env`.
pub fn rollout(env: &mut Env, spec: &PolicySpec, models: &ModelSet, seed: u64) -> Result<(Trajectory, EpisodeLog)> {
    let mut policy = make_policy(spec, models, env.task())?;
    let (mut traj, log) = run_episode(env, policy.as_mut(), seed)?;
    traj.meta.policy = match spec.kind {
        PolicyKind::Scripted => ScriptedPolicy::VERSION.to_string(),
        k => k.name().to_string(),
    };
    Ok((traj, log))
}

/// Observed force after step `t` (`f_{t+1}`).
pub fn next_force(traj: &Trajectory, log: &EpisodeLog, t: usize) -> Option<Wrench> {
    if t + 1 < traj.len() {
        Some(traj.f[t + 1])
    } else {
        log.final_force
    }
}

/// Metrics of one evaluated episode.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub policy: String,
    pub preset: String,
    pub episode: usize,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub episode_return: f64,
    /// Steps with a reference force whose next observed force exceeds [`CONTACT_FORCE`].
    pub contact_steps: usize,
    /// Sum over contact steps of the squared tracking error, per axis.
    pub sq_error: Vec<f64>,
    /// Per-axis RMSE over contact steps (NaN without contact steps or reference).
    pub rmse: Vec<f64>,
    /// Largest observed force norm over the episode.
    pub peak_force: f64,
}

impl EpisodeMetrics {
    pub fn from_episode(policy: &str, preset: &str, episode: usize, seed: u64, traj: &Trajectory, log: &EpisodeLog) -> Self {
        let dof = traj.f.first().map(|f| f.dof()).unwrap_or(0);
        let mut sq = vec![0.0; dof];
        let mut contact = 0;
        let mut peak: f64 = 0.0;
        for t in 0..traj.len() {
            let Some(actual) = next_force(traj, log, t) else { continue };
            peak = peak.max(actual.0.norm());
            let decision = &log.decisions[t];
            let Some(reference) = decision.planned_force.or(decision.reference_force) else { continue };
            if actual.0.norm() <= CONTACT_FORCE {
                continue;
            }
            contact += 1;
            for i in 0..dof {
                let e = reference[i] - actual[i];
                sq[i] += e * e;
            }
        }
        for f in &traj.f {
            peak = peak.max(f.0.norm());
        }
        let rmse = sq.iter().map(|s| if contact > 0 { math::sqrt(s / contact as f64) } else { f64::NAN }).collect();
        EpisodeMetrics {
            policy: policy.to_string(),
            preset: preset.to_string(),
            episode,
            seed,
            success: traj.success,
            steps: traj.len(),
            episode_return: traj.episode_return(),
            contact_steps: contact,
            sq_error: sq,
            rmse,
            peak_force: peak,
        }
    }
}

/// Aggregate over the episodes of one (policy, preset) cell.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct CellSummary {
    pub policy: String,
    pub preset: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub contact_steps: usize,
    /// Per-axis RMSE pooled over every contact step of the cell.
    pub rmse: Vec<f64>,
    /// Norm of the pooled tracking error, `sqrt(Σ_axes Σ_steps e² / steps)`.
    pub rmse_norm: f64,
}

#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeMetrics>,
    pub cells: Vec<CellSummary>,
}

impl EvalReport {
    pub fn cell(&self, policy: &str, preset: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.policy == policy && c.preset == preset)
    }

    /// Tracking RMSE pooled over several presets for one policy.
    pub fn pooled_rmse(&self, policy: &str, presets: &[&str]) -> f64 {
        let mut sq = 0.0;
        let mut n = 0;
        for e in self.episodes.iter().filter(|e| e.policy == policy && presets.contains(&e.preset.as_str())) {
            sq += e.sq_error.iter().sum::<f64>();
            n += e.contact_steps;
        }
        if n == 0 {
            f64::NAN
        } else {
            math::sqrt(sq / n as f64)
        }
    }
}

fn summarize(policy: &str, preset: &str, eps: &[EpisodeMetrics]) -> CellSummary {
    let n = eps.len();
    let dof = eps.first().map(|e| e.sq_error.len()).unwrap_or(0);
    let contact: usize = eps.iter().map(|e| e.contact_steps).sum();
    let mut sq = vec![0.0; dof];
    for e in eps {
        for i in 0..dof {
            sq[i] += e.sq_error[i];
        }
    }
    let pooled = |s: f64| if contact > 0 { math::sqrt(s / contact as f64) } else { f64::NAN };
    CellSummary {
        policy: policy.to_string(),
        preset: preset.to_string(),
        episodes: n,
        success_rate: if n > 0 { eps.iter().filter(|e| e.success).count() as f64 / n as f64 } else { 0.0 },
        mean_return: if n > 0 { eps.iter().map(|e| e.episode_return).sum::<f64>() / n as f64 } else { 0.0 },
        contact_steps: contact,
        rmse: sq.iter().map(|s| pooled(*s)).collect(),
        rmse_norm: pooled(sq.iter().sum()),
    }
}

/// Evaluate every policy on every preset over the same episode seeds, so
/// episode `i` has an identical start pose, hole offset and noise stream
/// for every policy. Rows are ordered by policy, preset, then episode.
pub fn evaluate(envs: &mut [Env], specs: &[PolicySpec], models: &ModelSet, seeds: &[u64]) -> Result<EvalReport> {
    if specs.is_empty() || envs.is_empty() {
        return Err(Error::usage("evaluation needs at least one policy and one preset"));
    }
    let mut report = EvalReport::default();
    for spec in specs {
        let name = spec.kind.name();
        for env in envs.iter_mut() {
            let preset = env.preset().name.clone();
            let mut policy = make_policy(spec, models, env.task())?;
            let mut cell = Vec::with_capacity(seeds.len());
            for (i, &seed) in seeds.iter().enumerate() {
                let (traj, log) = run_episode(env, policy.as_mut(), seed)?;
                cell.push(EpisodeMetrics::from_episode(name, &preset, i, seed, &traj, &log));
            }
            report.cells.push(summarize(name, &preset, &cell));
            report.episodes.extend(cell);
        }
    }
    Ok(report)
}

/// One step of an ablation trace.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    /// Observed `f_z` after the step.
    pub f_z_actual: f64,
    /// Planned (scaled) `f_z` for that moment.
    pub f_z_desired: f64,
    pub k_z: f64,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct AblationTrace {
    pub factor: f64,
    pub seed: u64,
    pub success: bool,
    pub steps: Vec<TraceStep>,
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct AblationSummary {
    pub factor: f64,
    /// Per-seed mean |f_z| over contact steps, averaged over seeds with contact.
    pub mean_abs_fz: f64,
    /// Per-seed time average of the commanded `k_z`, averaged over seeds.
    pub mean_kz: f64,
    pub contact_steps: usize,
    pub success_rate: f64,
}

#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct AblationReport {
    pub traces: Vec<AblationTrace>,
    pub summary: Vec<AblationSummary>,
}

/// Roll out planner + tuner with the planned force multiplied by each factor;
/// the planner's motion is left untouched.
pub fn ablate_force_scale(env: &mut Env, models: &ModelSet, factors: &[f64], seeds: &[u64]) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for &factor in factors {
        check_scale(factor)?;
        let spec = PolicySpec { force_scale: factor, ..PolicySpec::of(PolicyKind::FpGt) };
        let mut policy = make_policy(&spec, models, env.task())?;
        let (mut fz_sum, mut fz_seeds, mut kz_sum, mut kz_seeds) = (0.0, 0usize, 0.0, 0usize);
        let (mut contact_total, mut wins) = (0usize, 0usize);
        for &seed in seeds {
            let (traj, log) = run_episode(env, policy.as_mut(), seed)?;
            let mut trace = AblationTrace { factor, seed, success: traj.success, steps: Vec::with_capacity(traj.len()) };
            let (mut fz, mut kz, mut contact) = (0.0, 0.0, 0usize);
            for t in 0..traj.len() {
                let actual = next_force(&traj, &log, t).unwrap_or_else(|| Wrench::zeros(traj.f[t].dof()));
                let d = &log.decisions[t];
                let desired = d.planned_force.map(|f| f[AXIS_Z]).unwrap_or(f64::NAN);
                let k_z = d.action.k[AXIS_Z];
                trace.steps.push(TraceStep { t, f_z_actual: actual[AXIS_Z], f_z_desired: desired, k_z });
                kz += k_z;
                if actual.0.norm() > CONTACT_FORCE {
                    fz += actual[AXIS_Z].abs();
                    contact += 1;
                }
            }
            if contact > 0 {
                fz_sum += fz / contact as f64;
                fz_seeds += 1;
            }
            if !traj.is_empty() {
                kz_sum += kz / traj.len() as f64;
                kz_seeds += 1;
            }
            contact_total += contact;
            wins += usize::from(traj.success);
            report.traces.push(trace);
        }
        report.summary.push(AblationSummary {
            factor,
            mean_abs_fz: if fz_seeds > 0 { fz_sum / fz_seeds as f64 } else { 0.0 },
            mean_kz: if kz_seeds > 0 { kz_sum / kz_seeds as f64 } else { f64::NAN },
            contact_steps: contact_total,
            success_rate: if seeds.is_empty() { 0.0 } else { wins as f64 / seeds.len() as f64 },
        });
    }
    Ok(report)
}

/// Fresh joint baseline with statistics fitted on `dataset`.
pub fn init_joint(dataset: &Dataset, model: &ModelConfig, seed: u64) -> Result<SeqModel> {
    SeqModel::new(ModelKind::Joint, model.clone(), FeatureStats::fit(dataset)?, seed ^ 0x6a74)
}

/// Train the joint baseline with the same statistics, budget and backbone as the planner.
pub fn train_joint_baseline(
    dataset: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<(SeqModel, Vec<TrainReport>)> {
    let joint = init_joint(dataset, model, config.seed)?;
    let mut learners = [Learner::new(joint, config.lr)];
    let reports = train(&mut learners, dataset, config, hooks)?;
    let [l] = learners;
    Ok((l.into_model(), reports))
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: u64,
    /// Divisor applied to the base learning rate.
    pub lr_divisor: f64,
    pub base_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { steps: 100, lr_divisor: 5.0, base_lr: 5e-4, batch_size: 64, seed: 0, log_every: 10 }
    }
}

/// Continue planner training on a small trajectory set at a reduced rate.
/// Normalization statistics stay frozen; the gain tuner is not involved.
pub fn finetune_fp(
    fp: &SeqModel,
    trajectories: Vec<Trajectory>,
    config: &FinetuneConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<(SeqModel, Vec<TrainReport>)> {
    if fp.kind() != ModelKind::ForcePlanner {
        return Err(Error::usage("fine-tuning expects a force planner"));
    }
    if trajectories.is_empty() {
        return Err(Error::usage("fine-tuning needs at least one trajectory"));
    }
    if !(config.lr_divisor > 0.0) {
        return Err(Error::usage("lr_divisor must be positive"));
    }
    let dataset = build_dataset(trajectories)?.dataset;
    if config.steps == 0 {
        return Ok((fp.clone(), Vec::new()));
    }
    let lr = config.base_lr / config.lr_divisor;
    let tc = TrainConfig {
        steps: config.steps,
        batch_size: config.batch_size,
        lr,
        seed: config.seed,
        log_every: config.log_every,
        checkpoint_every: 0,
    };
    let mut learners = [Learner::new(fp.clone(), lr)];
    let reports = train(&mut learners, &dataset, &tc, hooks)?;
    let [l] = learners;
    Ok((l.into_model(), reports))
}
