mod common;

use common::*;
use forcegain_core::datagen::{build_windows, Dataset, Trajectory};
use forcegain_core::dynamics::{Pose, Twist, Wrench};
use forcegain_core::seqmodel::*;
use proptest::prelude::*;

const KINDS: [ModelKind; 3] = [ModelKind::GainTuner, ModelKind::ForcePlanner, ModelKind::Joint];

fn model(kind: ModelKind, config: ModelConfig, ds: &Dataset, seed: u64) -> SeqModel {
    SeqModel::new(kind, config, FeatureStats::fit(ds).unwrap(), seed).unwrap()
}

fn total_loss(m: &SeqModel, ds: &Dataset, rows: &[usize]) -> f64 {
    m.dataset_loss(ds, rows).unwrap().iter().sum()
}

/// Central differences over every parameter of a width-8, H=3 model.
fn max_fd_error(kind: ModelKind, backbone: Backbone) -> f64 {
    let ds = random_dataset(11, 3, 6, &no_rule);
    let rows: Vec<usize> = (0..ds.len()).collect();
    let m = model(kind, tiny_config(3, 8, backbone), &ds, 5);
    let mut learner = Learner::new(m.clone(), 1e-3);
    learner.gradient(&ds, &rows).unwrap();
    let analytic = learner.grads().to_vec();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = m.clone();
    for i in 0..m.params.len() {
        probe.params[i] = m.params[i] + h;
        let up = total_loss(&probe, &ds, &rows);
        probe.params[i] = m.params[i] - h;
        let down = total_loss(&probe, &ds, &rows);
        probe.params[i] = m.params[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradients_match_finite_differences_windowed_mlp() {
    for kind in KINDS {
        let err = max_fd_error(kind, Backbone::WindowedMlp);
        assert!(err < 1e-4, "{kind:?}: max relative error {err:e}");
    }
}

#[test]
fn gradients_match_finite_differences_attention() {
    for kind in KINDS {
        let err = max_fd_error(kind, Backbone::TinyCausalAttention);
        assert!(err < 1e-4, "{kind:?}: max relative error {err:e}");
    }
}

#[test]
fn every_tensor_receives_gradient() {
    let ds = random_dataset(2, 4, 8, &no_rule);
    let rows: Vec<usize> = (0..ds.len()).collect();
    for backbone in [Backbone::WindowedMlp, Backbone::TinyCausalAttention] {
        for kind in KINDS {
            let m = model(kind, tiny_config(3, 8, backbone), &ds, 1);
            let layout = m.net().layout().clone();
            let mut l = Learner::new(m, 1e-3);
            l.gradient(&ds, &rows).unwrap();
            for t in &layout.tensors {
                let g = &l.grads()[t.range()];
                assert!(g.iter().any(|v| *v != 0.0), "{kind:?} {backbone:?}: {} has zero gradient", t.name);
            }
        }
    }
}

fn fp_query(ds: &Dataset, row: usize, h: usize) -> (forcegain_core::datagen::GtWindow, forcegain_core::datagen::FpWindow) {
    ds.windows(&ds.rows[row], h).unwrap()
}

#[test]
fn masked_slots_do_not_change_outputs() {
    let ds = random_dataset(3, 2, 10, &no_rule);
    for backbone in [Backbone::WindowedMlp, Backbone::TinyCausalAttention] {
        let cfg = tiny_config(5, 8, backbone);
        let gt = model(ModelKind::GainTuner, cfg.clone(), &ds, 1);
        let fp = model(ModelKind::ForcePlanner, cfg.clone(), &ds, 2);
        let joint = model(ModelKind::Joint, cfg, &ds, 3);
        let traj = &ds.trajectories[0];
        let t = 2;
        let (gw, fw) = build_windows(traj, &ds.returns[0], t, 5).unwrap();
        assert_eq!(gw.valid(), 2);
        let (mut gw2, mut fw2) = (gw.clone(), fw.clone());
        for j in 0..3 {
            gw2.slots[j].k = forcegain_core::dynamics::Vector::splat(3, 7.0e5);
            gw2.slots[j].f_next = Wrench::from_slice(&[1e3, -4e2, 9.0]).unwrap();
            gw2.slots[j].x = Pose::from_slice(&[5.0, 5.0, 5.0]).unwrap();
            fw2.slots[j].ret = -123.0;
            fw2.slots[j].f = Wrench::from_slice(&[-9e3, 1.0, 2.0]).unwrap();
            fw2.slots[j].dx = Pose::from_slice(&[0.5, 0.5, 0.5]).unwrap();
        }
        let (x, v, f, dx) = (&traj.x[t], &traj.v[t], &traj.f[t], &traj.dx[t]);
        let fnext = &traj.f[t + 1];
        assert_eq!(gt_forward(&gt, &gw, x, v, dx, fnext).unwrap(), gt_forward(&gt, &gw2, x, v, dx, fnext).unwrap());
        assert_eq!(fp_forward(&fp, &fw, x, v, f, -0.3).unwrap(), fp_forward(&fp, &fw2, x, v, f, -0.3).unwrap());
        assert_eq!(
            joint_forward(&joint, &gw, &fw, x, v, f, -0.3).unwrap(),
            joint_forward(&joint, &gw2, &fw2, x, v, f, -0.3).unwrap()
        );
    }
}

#[test]
fn wrong_window_length_is_usage_error() {
    let ds = random_dataset(3, 1, 10, &no_rule);
    let gt = model(ModelKind::GainTuner, tiny_config(4, 8, Backbone::WindowedMlp), &ds, 1);
    let (gw, fw) = fp_query(&ds, 3, 3);
    let traj = &ds.trajectories[0];
    assert!(gt_forward(&gt, &gw, &traj.x[3], &traj.v[3], &traj.dx[3], &traj.f[4]).is_err());
    // A gain tuner cannot answer planner queries.
    let gt3 = model(ModelKind::GainTuner, tiny_config(3, 8, Backbone::WindowedMlp), &ds, 1);
    assert!(fp_forward(&gt3, &fw, &traj.x[3], &traj.v[3], &traj.f[3], -0.1).is_err());
}

fn extreme_window(vals: &[f64], h: usize) -> Trajectory {
    let mut t = Trajectory::default();
    let mut it = vals.iter().cycle();
    let mut next3 = || [*it.next().unwrap(), *it.next().unwrap(), *it.next().unwrap()];
    for _ in 0..=h {
        t.x.push(Pose::from_slice(&next3()).unwrap());
        t.v.push(Twist::from_slice(&next3()).unwrap());
        t.f.push(Wrench::from_slice(&next3()).unwrap());
        t.dx.push(Pose::from_slice(&next3()).unwrap());
        t.k.push(forcegain_core::dynamics::Vector::from_slice(&next3()).unwrap());
        t.r.push(-next3()[0].abs());
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn outputs_stay_in_bounds(vals in prop::collection::vec(-1e6f64..1e6, 7..40), attn in any::<bool>(), seed in 0u64..1000) {
        let ds = random_dataset(9, 2, 8, &no_rule);
        let backbone = if attn { Backbone::TinyCausalAttention } else { Backbone::WindowedMlp };
        let cfg = tiny_config(4, 8, backbone);
        let gt = model(ModelKind::GainTuner, cfg.clone(), &ds, seed);
        let fp = model(ModelKind::ForcePlanner, cfg.clone(), &ds, seed + 1);
        let joint = model(ModelKind::Joint, cfg.clone(), &ds, seed + 2);
        let traj = extreme_window(&vals, 4);
        let rtg: Vec<f64> = traj.r.iter().map(|r| r * 10.0).collect();
        let (gw, fw) = build_windows(&traj, &rtg, 4, 4).unwrap();
        let (x, v, f, dx) = (&traj.x[4], &traj.v[4], &traj.f[4], &traj.dx[4]);
        let k = gt_forward(&gt, &gw, x, v, dx, f).unwrap();
        let (mdx, mf) = fp_forward(&fp, &fw, x, v, f, rtg[4]).unwrap();
        let (jdx, jk) = joint_forward(&joint, &gw, &fw, x, v, f, rtg[4]).unwrap();
        for i in 0..3 {
            prop_assert!((cfg.k_min..=cfg.k_max).contains(&k[i]));
            prop_assert!((cfg.k_min..=cfg.k_max).contains(&jk[i]));
            prop_assert!(mdx[i].abs() <= cfg.dx_max[i]);
            prop_assert!(jdx[i].abs() <= cfg.dx_max[i]);
            prop_assert!(mf[i].is_finite());
        }
        // Pure function of parameters and inputs.
        prop_assert_eq!(k, gt_forward(&gt, &gw, x, v, dx, f).unwrap());
    }
}

#[test]
fn perfect_predictions_give_zero_loss() {
    let ds = random_dataset(4, 1, 5, &no_rule);
    let m = model(ModelKind::ForcePlanner, tiny_config(3, 8, Backbone::WindowedMlp), &ds, 0);
    let u = [0.3, -2.0, 1.5, 0.7, -0.1, 4.0];
    let mut phys = [0.0; 6];
    m.decode(&u, &mut phys);
    let mut target = [0.0; 6];
    m.encode_target(&phys, &mut target);
    let (mut du, mut losses) = ([0.0; 6], [0.0; 2]);
    m.head_losses(&u, &target, 1.0, &mut du, &mut losses);
    assert!(losses.iter().all(|l| *l < 1e-24), "{losses:?}");
    assert!(du.iter().all(|d| d.abs() < 1e-10));
}

#[test]
fn planner_loss_is_sum_of_independent_head_errors() {
    let ds = random_dataset(5, 2, 6, &no_rule);
    let m = model(ModelKind::ForcePlanner, tiny_config(3, 8, Backbone::WindowedMlp), &ds, 4);
    let rows: Vec<usize> = (0..ds.len()).collect();
    let losses = m.dataset_loss(&ds, &rows).unwrap();
    let stats = m.stats().clone();
    let (mut motion, mut force) = (0.0, 0.0);
    for row in &ds.rows {
        let traj = &ds.trajectories[row.traj];
        let (_, fw) = ds.windows(row, 3).unwrap();
        let (dx, f) = fp_forward(&m, &fw, &traj.x[row.t], &traj.v[row.t], &traj.f[row.t], row.ret).unwrap();
        for i in 0..3 {
            motion += ((dx[i] - traj.dx[row.t][i]) / stats.dx.std[i]).powi(2);
            force += ((f[i] - row.f_next[i]) / stats.f.std[i]).powi(2);
        }
    }
    let n = ds.len() as f64;
    assert!((losses[0] - motion / n).abs() < 1e-9 * (1.0 + motion / n));
    assert!((losses[1] - force / n).abs() < 1e-9 * (1.0 + force / n));
}

fn fixed_batch_drop(kind: ModelKind) -> f64 {
    let ds = random_dataset(21, 8, 12, &no_rule);
    let batch: Vec<usize> = (0..64).map(|i| (i * 7) % ds.len()).collect();
    let mut l = Learner::new(model(kind, ModelConfig::default(), &ds, 9), 5e-4);
    let first = l.step(&ds, &batch, 0).unwrap().loss;
    let mut last = first;
    for s in 1..500 {
        last = l.step(&ds, &batch, s).unwrap().loss;
    }
    first / last
}

#[test]
fn single_batch_overfit() {
    for kind in KINDS {
        let drop = fixed_batch_drop(kind);
        assert!(drop >= 10.0, "{kind:?}: loss dropped only {drop:.1}x");
    }
}

fn held_out_ratio(kind: ModelKind, rule: &dyn Fn(&mut Trajectory, usize), check: &dyn Fn(&SeqModel, &Dataset) -> f64) -> f64 {
    let train_ds = random_dataset(31, 60, 30, rule);
    let test_ds = random_dataset(32, 15, 30, rule);
    let cfg = ModelConfig { embed_width: 32, hidden: vec![64, 64], ..ModelConfig::default() };
    let m = model(kind, cfg, &train_ds, 3);
    let mut learners = [Learner::new(m, 2e-3)];
    let tc = TrainConfig { steps: 3000, lr: 2e-3, seed: 1, ..TrainConfig::default() };
    train(&mut learners, &train_ds, &tc, &mut NoHooks).unwrap();
    check(&learners[0].model, &test_ds)
}

/// Worst per-axis ratio of prediction MSE to target variance.
fn worst_axis_ratio(pairs: &[([f64; 3], [f64; 3])]) -> f64 {
    let n = pairs.len() as f64;
    (0..3)
        .map(|i| {
            let mean = pairs.iter().map(|(_, y)| y[i]).sum::<f64>() / n;
            let var = pairs.iter().map(|(_, y)| (y[i] - mean).powi(2)).sum::<f64>() / n;
            let mse = pairs.iter().map(|(p, y)| (p[i] - y[i]).powi(2)).sum::<f64>() / n;
            mse / var
        })
        .fold(0.0, f64::max)
}

#[test]
fn gain_tuner_recovers_planted_rule() {
    const C: [f64; 3] = [50.0, 20.0, 4000.0];
    let rule = |tr: &mut Trajectory, t: usize| {
        if t + 1 < tr.len() {
            for i in 0..3 {
                tr.k[t][i] = (C[i] * tr.f[t + 1][i].abs()).clamp(10.0, 1000.0);
            }
        }
    };
    let ratio = held_out_ratio(ModelKind::GainTuner, &rule, &|m, ds| {
        let pairs: Vec<_> = ds
            .rows
            .iter()
            .map(|row| {
                let tr = &ds.trajectories[row.traj];
                let (gw, _) = ds.windows(row, m.config().window).unwrap();
                let k = gt_forward(m, &gw, &tr.x[row.t], &tr.v[row.t], &tr.dx[row.t], &row.f_next).unwrap();
                ([k[0], k[1], k[2]], [tr.k[row.t][0], tr.k[row.t][1], tr.k[row.t][2]])
            })
            .collect();
        worst_axis_ratio(&pairs)
    });
    assert!(ratio < 0.05, "held-out MSE / variance = {ratio:.4}");
}

#[test]
fn force_planner_recovers_planted_affine_rule() {
    const A: [f64; 3] = [2000.0, 1500.0, 4.0];
    const B: [f64; 3] = [1.0, -5.0, 0.02];
    let rule = |tr: &mut Trajectory, t: usize| {
        if t + 1 < tr.len() {
            for i in 0..3 {
                tr.f[t + 1][i] = A[i] * tr.x[t][i] + B[i];
                tr.dx[t][i] = -0.1 * tr.x[t][i];
            }
        }
    };
    let ratio = held_out_ratio(ModelKind::ForcePlanner, &rule, &|m, ds| {
        let pairs: Vec<_> = ds
            .rows
            .iter()
            .map(|row| {
                let tr = &ds.trajectories[row.traj];
                let (_, fw) = ds.windows(row, m.config().window).unwrap();
                let (_, f) = fp_forward(m, &fw, &tr.x[row.t], &tr.v[row.t], &tr.f[row.t], row.ret).unwrap();
                ([f[0], f[1], f[2]], [row.f_next[0], row.f_next[1], row.f_next[2]])
            })
            .collect();
        worst_axis_ratio(&pairs)
    });
    assert!(ratio < 0.05, "held-out MSE / variance = {ratio:.4}");
}

#[test]
fn zero_steps_leave_models_unchanged() {
    let ds = random_dataset(6, 3, 8, &no_rule);
    let cfg = tiny_config(4, 8, Backbone::WindowedMlp);
    let tc = TrainConfig { steps: 0, ..TrainConfig::default() };
    let (gt, fp, reports) = train_gt_fp(&ds, &cfg, &tc, &mut NoHooks).unwrap();
    let stats = FeatureStats::fit(&ds).unwrap();
    assert!(reports.is_empty());
    assert_eq!(gt, SeqModel::new(ModelKind::GainTuner, cfg.clone(), stats.clone(), tc.seed ^ 0x6774).unwrap());
    assert_eq!(fp, SeqModel::new(ModelKind::ForcePlanner, cfg, stats, tc.seed ^ 0x6670).unwrap());
}

#[test]
fn training_is_deterministic() {
    let ds = random_dataset(7, 4, 10, &no_rule);
    let cfg = tiny_config(4, 8, Backbone::TinyCausalAttention);
    let tc = TrainConfig { steps: 40, batch_size: 8, seed: 77, log_every: 10, ..TrainConfig::default() };
    let a = train_gt_fp(&ds, &cfg, &tc, &mut NoHooks).unwrap();
    let b = train_gt_fp(&ds, &cfg, &tc, &mut NoHooks).unwrap();
    assert_eq!(a.0.params, b.0.params);
    assert_eq!(a.1.params, b.1.params);
    assert_eq!(a.2, b.2);
    assert_eq!(a.2.len(), 4);
    assert!(a.2.iter().all(|r| r.loss_gt().unwrap() >= 0.0 && r.loss_fp().unwrap() >= 0.0));
}

#[test]
fn empty_batch_and_dataset_are_rejected() {
    let ds = random_dataset(8, 2, 5, &no_rule);
    let mut l = Learner::new(model(ModelKind::GainTuner, tiny_config(3, 8, Backbone::WindowedMlp), &ds, 0), 1e-3);
    assert!(l.step(&ds, &[], 0).is_err());
    let empty = Dataset::default();
    assert!(train(&mut [l], &empty, &TrainConfig::default(), &mut NoHooks).is_err());
}
