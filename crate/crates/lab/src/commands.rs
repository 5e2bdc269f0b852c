//! The five run commands. Each writes `config.<command>.toml` into the run
//! directory before doing any work, so the snapshot alone reproduces it.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use forcegain_core::datagen::{self, augment_all, build_dataset, return_stats, Dataset, Trajectory};
use forcegain_core::envsim::Env;
use forcegain_core::seqmodel::{init_gt_fp, strided_rows, train, Learner, ModelKind, SeqModel, TrainHooks, TrainReport};
use forcegain_core::transfer::{
    ablate_force_scale, default_target_return, evaluate, finetune_fp, init_joint, AblationReport, EvalReport, ModelSet,
    PolicyKind, PolicySpec,
};
use serde::Serialize;

use crate::config::{Command, RunConfig, ABLATE_SEEDS, EVAL_SEEDS, FINETUNE_EVAL_SEEDS, FINETUNE_HELD_SEEDS, FINETUNE_SEEDS};
use crate::report::{self, FinetuneStage, HeldOut, LossCurve};
use crate::store::{self, Checkpoint, Manifest};
use crate::{presets, Failure, Result};

pub fn snapshot_path(cfg: &RunConfig, cmd: Command) -> PathBuf {
    cfg.out.join(format!("config.{}.toml", cmd.name()))
}

fn snapshot(cfg: &RunConfig, cmd: Command) -> Result<()> {
    store::write_file(&snapshot_path(cfg, cmd), cfg.to_toml().as_bytes())
}

fn env_for(cfg: &RunConfig, preset: &str) -> Result<Env> {
    Ok(Env::new(presets::resolve(preset)?, cfg.task)?)
}

/// Roll out the scripted policy, write raw and augmented JSONL plus the manifest.
pub fn collect(cfg: &RunConfig) -> Result<Manifest> {
    snapshot(cfg, Command::Collect)?;
    let mut env = env_for(cfg, &cfg.collect.preset)?;
    let seeds = cfg.seeds(0, cfg.collect.episodes);
    let raw = datagen::collect(&mut env, &cfg.collect.scripted, seeds.iter().copied())?;
    let augmented = augment_all(&raw, &cfg.collect.augment, cfg.augment_seed()).split_off(raw.len());

    let dir = cfg.data_dir();
    let mut files = Vec::new();
    for (name, trajs) in [(store::RAW_FILE, &raw), (store::AUGMENTED_FILE, &augmented)] {
        let bytes = store::encode_jsonl(trajs);
        store::write_file(&dir.join(name), &bytes)?;
        files.push(store::FileEntry { name: name.into(), records: trajs.len(), sha256: store::sha256_hex(&bytes) });
    }
    let manifest = Manifest {
        format: store::MANIFEST_FORMAT.into(),
        seed: cfg.seed,
        preset: env.preset().clone(),
        task: cfg.task,
        episode_seeds: seeds,
        scripted: cfg.collect.scripted,
        augment: cfg.collect.augment,
        augment_seed: cfg.augment_seed(),
        stats: (!raw.is_empty()).then(|| return_stats(&raw)),
        files,
        created_at: store::unix_now(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    store::write_file(&dir.join(store::MANIFEST_FILE), &json)?;

    println!("collected {} episodes on {} ({} augmented copies)", raw.len(), env.preset().name, augmented.len());
    if let Some(s) = &manifest.stats {
        println!("success fraction {:.3}", s.success_fraction);
        println!(
            "return min {:.3}  q25 {:.3}  median {:.3}  q75 {:.3}  max {:.3}",
            s.min, s.q25, s.median, s.q75, s.max
        );
    }
    println!("wrote {}", dir.display());
    Ok(manifest)
}

/// Training split and held-out split of a collected dataset. Held-out
/// episodes are chosen among the raw ones and take their augmented copies along.
pub fn split_dataset(raw: &[Trajectory], augmented: &[Trajectory], every: usize) -> Result<(Dataset, Dataset)> {
    let held_seeds: BTreeSet<u64> = raw
        .iter()
        .enumerate()
        .filter(|(i, _)| every > 0 && i % every == every - 1)
        .map(|(_, t)| t.meta.seed)
        .collect();
    let is_held = |t: &Trajectory| held_seeds.contains(&t.meta.seed);
    let train_set: Vec<Trajectory> = raw.iter().chain(augmented).filter(|t| !is_held(t)).cloned().collect();
    let held_set: Vec<Trajectory> = raw.iter().filter(|t| is_held(t)).cloned().collect();
    Ok((build_dataset(train_set)?.dataset, build_dataset(held_set)?.dataset))
}

fn score(models: &[&SeqModel], dataset: &Dataset, rows: &[usize], step: u64) -> forcegain_core::Result<HeldOut> {
    let losses = models
        .iter()
        .map(|m| {
            if rows.is_empty() {
                Ok(vec![f64::NAN; m.head_names().len()])
            } else {
                m.dataset_loss(dataset, rows)
            }
        })
        .collect::<forcegain_core::Result<Vec<_>>>()?;
    Ok(HeldOut { step, losses })
}

struct RunHooks<'a> {
    start: Instant,
    held: &'a Dataset,
    held_rows: Vec<usize>,
    curve: LossCurve,
    checkpoint_dir: PathBuf,
    names: Vec<&'static str>,
    target_return: f64,
    label: &'static str,
    /// Host-side failure that stopped training.
    failure: Option<Failure>,
}

impl TrainHooks for RunHooks<'_> {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn on_report(&mut self, report: &TrainReport, models: &[&SeqModel]) -> forcegain_core::Result<()> {
        let held = score(models, self.held, &self.held_rows, report.step)?;
        self.curve.push(report, &held);
        let parts: Vec<String> = report
            .models
            .iter()
            .zip(&held.losses)
            .map(|(m, h)| format!("{} {:.4} (held-out {:.4})", m.kind.name(), m.loss, h.iter().sum::<f64>()))
            .collect();
        eprintln!("[{}] step {:>6}  {}  {:.0}s", self.label, report.step, parts.join("  "), report.wall_time);
        Ok(())
    }

    fn on_checkpoint(&mut self, step: u64, models: &[&SeqModel]) -> forcegain_core::Result<()> {
        for (name, m) in self.names.iter().zip(models) {
            let path = store::checkpoint_path(&self.checkpoint_dir, &format!("{name}_step{step}"));
            if let Err(e) = store::save_checkpoint(&path, &Checkpoint::new((*m).clone(), step, self.target_return)) {
                self.failure = Some(e);
                return Err(forcegain_core::Error::Usage("checkpoint could not be written".into()));
            }
        }
        Ok(())
    }
}

/// Held-out losses before and after one training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossSummary {
    pub kind: ModelKind,
    pub initial: Vec<f64>,
    pub last: Vec<f64>,
}

impl LossSummary {
    pub fn initial_total(&self) -> f64 {
        self.initial.iter().sum()
    }

    pub fn last_total(&self) -> f64 {
        self.last.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub models: ModelSet,
    pub losses: Vec<LossSummary>,
    pub curve_rows: usize,
}

#[allow(clippy::too_many_arguments)]
fn train_group(
    cfg: &RunConfig,
    label: &'static str,
    names: Vec<&'static str>,
    models: Vec<SeqModel>,
    train_ds: &Dataset,
    held: &Dataset,
    target_return: f64,
    curve_file: &str,
) -> Result<(Vec<SeqModel>, Vec<LossSummary>, usize, f64)> {
    let held_rows = strided_rows(held, cfg.train.held_out_rows);
    let train_rows = strided_rows(train_ds, cfg.train.held_out_rows);
    let refs: Vec<&SeqModel> = models.iter().collect();
    let init_held = score(&refs, held, &held_rows, 0)?;
    let init_train = score(&refs, train_ds, &train_rows, 0)?;
    let mut curve = LossCurve::new(models.iter().map(|m| (m.kind(), m.head_names())).collect());
    curve.initial(&init_train, &init_held);

    let tc = cfg.train_config();
    let mut learners: Vec<Learner> = models.into_iter().map(|m| Learner::new(m, tc.lr)).collect();
    let mut hooks = RunHooks {
        start: Instant::now(),
        held,
        held_rows: held_rows.clone(),
        curve,
        checkpoint_dir: cfg.checkpoint_dir(),
        names: names.clone(),
        target_return,
        label,
        failure: None,
    };
    let trained = train(&mut learners, train_ds, &tc, &mut hooks);
    if let Some(f) = hooks.failure.take() {
        return Err(f);
    }
    trained?;
    let seconds = hooks.start.elapsed().as_secs_f64();
    let curve = hooks.curve;
    let trained: Vec<SeqModel> = learners.into_iter().map(Learner::into_model).collect();

    let refs: Vec<&SeqModel> = trained.iter().collect();
    let last_held = score(&refs, held, &held_rows, tc.steps)?;
    let losses = trained
        .iter()
        .zip(init_held.losses.into_iter().zip(last_held.losses))
        .map(|(m, (initial, last))| LossSummary { kind: m.kind(), initial, last })
        .collect();
    for (name, m) in names.iter().zip(&trained) {
        let path = store::checkpoint_path(&cfg.checkpoint_dir(), name);
        store::save_checkpoint(&path, &Checkpoint::new(m.clone(), tc.steps, target_return))?;
    }
    store::write_file(&cfg.out.join("train").join(curve_file), &curve.to_csv())?;
    Ok((trained, losses, curve.len(), seconds))
}

/// Train gain tuner and force planner (and the joint baseline if enabled).
pub fn train_cmd(cfg: &RunConfig) -> Result<TrainOutcome> {
    snapshot(cfg, Command::Train)?;
    let data = store::load_dataset(&cfg.data_dir())?;
    let (train_ds, held) = split_dataset(&data.raw, &data.augmented, cfg.train.held_out_every)?;
    if train_ds.is_empty() {
        return Err(Failure::runtime(format!("dataset in {} has no training rows", cfg.data_dir().display())));
    }
    let target_return = default_target_return(&train_ds)?;
    println!(
        "training on {} rows ({} held-out rows), {} steps, target return {:.4}",
        train_ds.len(),
        held.len(),
        cfg.train.steps,
        target_return
    );
    let mc = cfg.model_config();
    let (gt, fp) = init_gt_fp(&train_ds, &mc, cfg.seed)?;
    let (trained, mut losses, curve_rows, gt_fp_seconds) =
        train_group(cfg, "gt+fp", vec!["gt", "fp"], vec![gt, fp], &train_ds, &held, target_return, "loss_curve.csv")?;
    let mut trained = trained.into_iter();
    let mut models = ModelSet { gt: trained.next(), fp: trained.next(), joint: None, target_return };

    let mut timing = vec![("gt_fp_seconds", gt_fp_seconds)];
    if cfg.train.joint {
        let joint = init_joint(&train_ds, &mc, cfg.seed)?;
        let (trained, joint_losses, _, seconds) =
            train_group(cfg, "joint", vec!["joint"], vec![joint], &train_ds, &held, target_return, "joint_loss_curve.csv")?;
        models.joint = trained.into_iter().next();
        losses.extend(joint_losses);
        timing.push(("joint_seconds", seconds));
    }
    let timing: serde_json::Map<String, serde_json::Value> =
        timing.into_iter().map(|(k, v)| (k.to_string(), serde_json::json!(v))).collect();
    store::write_file(&cfg.out.join("train").join("timing.json"), &serde_json::to_vec_pretty(&timing).unwrap())?;

    for l in &losses {
        println!(
            "{:<5} held-out loss {:.4} -> {:.4} ({:.1}x)",
            l.kind.name(),
            l.initial_total(),
            l.last_total(),
            l.initial_total() / l.last_total()
        );
    }
    println!("wrote {}", cfg.checkpoint_dir().display());
    Ok(TrainOutcome { models, losses, curve_rows })
}

fn load_model(dir: &Path, name: &str, kind: ModelKind) -> Result<Checkpoint> {
    store::load_checkpoint(&store::checkpoint_path(dir, name), kind)
}

/// Checkpoints needed by `policies`; the planner is also loaded for
/// `joint_dt` when present, to supply its reference force.
pub fn load_models(dir: &Path, policies: &[PolicyKind]) -> Result<ModelSet> {
    let needs = |k: PolicyKind| policies.contains(&k);
    let mut set = ModelSet { target_return: f64::NAN, ..ModelSet::default() };
    let mut target = None;
    let fp_path = store::checkpoint_path(dir, "fp");
    if needs(PolicyKind::FpGt) || needs(PolicyKind::FixedGain) || (needs(PolicyKind::JointDt) && fp_path.exists()) {
        let c = load_model(dir, "fp", ModelKind::ForcePlanner)?;
        target = Some(c.target_return);
        set.fp = Some(c.model);
    }
    if needs(PolicyKind::FpGt) {
        set.gt = Some(load_model(dir, "gt", ModelKind::GainTuner)?.model);
    }
    if needs(PolicyKind::JointDt) {
        let c = load_model(dir, "joint", ModelKind::Joint)?;
        target.get_or_insert(c.target_return);
        set.joint = Some(c.model);
    }
    set.target_return = target.unwrap_or(0.0);
    Ok(set)
}

fn specs(cfg: &RunConfig, policies: &[PolicyKind]) -> Vec<PolicySpec> {
    policies
        .iter()
        .map(|&kind| PolicySpec {
            kind,
            fixed_gain: cfg.eval.fixed_gain,
            target_return: cfg.eval.target_return,
            scripted: cfg.collect.scripted,
            ..PolicySpec::of(kind)
        })
        .collect()
}

fn print_matrix(report: &EvalReport) {
    println!("{:<11} {:<20} {:>8} {:>9} {:>10}", "policy", "preset", "success", "return", "rmse [N]");
    for c in &report.cells {
        println!(
            "{:<11} {:<20} {:>8.2} {:>9.3} {:>10.2}",
            c.policy, c.preset, c.success_rate, c.mean_return, c.rmse_norm
        );
    }
}

/// Paired-seed evaluation of each policy on each preset.
pub fn eval_cmd(cfg: &RunConfig) -> Result<EvalReport> {
    snapshot(cfg, Command::Eval)?;
    let models = load_models(&cfg.checkpoint_dir(), &cfg.eval.policies)?;
    let mut envs = cfg.eval.presets.iter().map(|p| env_for(cfg, p)).collect::<Result<Vec<_>>>()?;
    let seeds = cfg.seeds(EVAL_SEEDS, cfg.eval.episodes);
    let report = evaluate(&mut envs, &specs(cfg, &cfg.eval.policies), &models, &seeds)?;
    let dir = cfg.out.join("eval");
    store::write_file(&dir.join("success_matrix.csv"), &report::success_matrix_csv(&report))?;
    store::write_file(&dir.join("episodes.csv"), &report::episodes_csv(&report))?;
    print_matrix(&report);
    println!("wrote {}", dir.display());
    Ok(report)
}

/// Desired-force scaling sweep on one preset.
pub fn ablate_cmd(cfg: &RunConfig) -> Result<AblationReport> {
    snapshot(cfg, Command::Ablate)?;
    let models = load_models(&cfg.checkpoint_dir(), &[PolicyKind::FpGt])?;
    let mut env = env_for(cfg, &cfg.ablate.preset)?;
    let seeds = cfg.seeds(ABLATE_SEEDS, cfg.ablate.seeds);
    let report = ablate_force_scale(&mut env, &models, &cfg.ablate.factors, &seeds)?;
    let dir = cfg.out.join("ablate");
    store::write_file(&dir.join("traces.csv"), &report::ablation_traces_csv(&report))?;
    store::write_file(&dir.join("summary.csv"), &report::ablation_summary_csv(&report))?;
    println!("{:>6} {:>12} {:>10} {:>8}", "factor", "mean |f_z|", "mean k_z", "success");
    for s in &report.summary {
        println!("{:>6.2} {:>12.3} {:>10.1} {:>8.2}", s.factor, s.mean_abs_fz, s.mean_kz, s.success_rate);
    }
    println!("wrote {}", dir.display());
    Ok(report)
}

struct CurveHooks<'a> {
    held: &'a Dataset,
    held_rows: Vec<usize>,
    curve: LossCurve,
}

impl TrainHooks for CurveHooks<'_> {
    fn on_report(&mut self, report: &TrainReport, models: &[&SeqModel]) -> forcegain_core::Result<()> {
        let held = score(models, self.held, &self.held_rows, report.step)?;
        self.curve.push(report, &held);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub before: FinetuneStage,
    pub after: FinetuneStage,
    pub fp: SeqModel,
}

/// Fine-tune the planner on a few scripted trajectories of a shifted preset
/// and compare planner + original tuner before and after.
pub fn finetune_cmd(cfg: &RunConfig) -> Result<FinetuneOutcome> {
    snapshot(cfg, Command::Finetune)?;
    let mut models = load_models(&cfg.checkpoint_dir(), &[PolicyKind::FpGt])?;
    let preset = cfg.finetune.preset.clone();
    let mut env = env_for(cfg, &preset)?;
    let scripted = &cfg.collect.scripted;
    let tune = datagen::collect(&mut env, scripted, cfg.seeds(FINETUNE_SEEDS, cfg.finetune.trajectories))?;
    let held_trajs = datagen::collect(&mut env, scripted, cfg.seeds(FINETUNE_HELD_SEEDS, cfg.finetune.held_out))?;
    let held = build_dataset(held_trajs)?.dataset;
    let held_rows: Vec<usize> = (0..held.len()).collect();
    let eval_seeds = cfg.seeds(FINETUNE_EVAL_SEEDS, cfg.finetune.episodes);
    let spec = specs(cfg, &[PolicyKind::FpGt]);

    let stage = |name: &'static str, models: &ModelSet, env: &mut Env| -> Result<FinetuneStage> {
        let fp = models.fp.as_ref().expect("planner loaded");
        let heldout = if held_rows.is_empty() { vec![f64::NAN; 2] } else { fp.dataset_loss(&held, &held_rows)? };
        let report = evaluate(std::slice::from_mut(env), &spec, models, &eval_seeds)?;
        let cell = &report.cells[0];
        Ok(FinetuneStage {
            stage: name,
            preset: preset.clone(),
            episodes: cell.episodes,
            success_rate: cell.success_rate,
            mean_return: cell.mean_return,
            heldout,
        })
    };
    let before = stage("before", &models, &mut env)?;

    let fp = models.fp.take().expect("planner loaded");
    let mut curve = LossCurve::new(vec![(fp.kind(), fp.head_names())]);
    if !tune.is_empty() {
        let tune_ds = build_dataset(tune.clone())?.dataset;
        let tune_rows: Vec<usize> = (0..tune_ds.len()).collect();
        curve.initial(&score(&[&fp], &tune_ds, &tune_rows, 0)?, &score(&[&fp], &held, &held_rows, 0)?);
    }
    let mut hooks = CurveHooks { held: &held, held_rows: held_rows.clone(), curve };
    let (tuned, _) = finetune_fp(&fp, tune, &cfg.finetune_config(), &mut hooks)?;
    models.fp = Some(tuned.clone());
    let after = stage("after", &models, &mut env)?;

    let target = cfg.eval.target_return.unwrap_or(models.target_return);
    let ckpt = Checkpoint::new(tuned.clone(), cfg.finetune.steps, target);
    store::save_checkpoint(&store::checkpoint_path(&cfg.checkpoint_dir(), "fp_finetuned"), &ckpt)?;
    let dir = cfg.out.join("finetune");
    store::write_file(&dir.join("summary.csv"), &report::finetune_summary_csv(&[before.clone(), after.clone()]))?;
    store::write_file(&dir.join("loss_curve.csv"), &hooks.curve.to_csv())?;
    for s in [&before, &after] {
        println!(
            "{:<6} {}  success {:.2}  held-out planner loss dx {:.4} f {:.4}",
            s.stage, s.preset, s.success_rate, s.heldout[0], s.heldout[1]
        );
    }
    println!("wrote {}", dir.display());
    Ok(FinetuneOutcome { before, after, fp: tuned })
}
