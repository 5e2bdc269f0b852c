use forcegain_core::datagen::*;
use forcegain_core::dynamics::{Pose, Twist, Vector, Wrench};
use forcegain_core::envsim::{axis_noise_std, Env, Preset, TaskConfig};
use forcegain_core::rng_from_seed;
use proptest::prelude::*;

fn nominal() -> Env {
    Env::new(Preset::builtin("train_nominal").unwrap(), TaskConfig::default()).unwrap()
}

/// Every field of step `i` carries `100·field + i` on axis 0 and offsets on the others.
fn sentinel(field: f64, i: usize) -> [f64; 3] {
    [0.0, 0.1, 0.2].map(|a| 100.0 * field + i as f64 + a)
}

fn sentinel_trajectory(len: usize) -> Trajectory {
    let mut t = Trajectory::default();
    for i in 0..len {
        t.x.push(Pose::from_slice(&sentinel(1.0, i)).unwrap());
        t.v.push(Twist::from_slice(&sentinel(2.0, i)).unwrap());
        t.f.push(Wrench::from_slice(&sentinel(3.0, i)).unwrap());
        t.dx.push(Pose::from_slice(&sentinel(4.0, i)).unwrap());
        t.k.push(Vector::from_slice(&sentinel(5.0, i)).unwrap());
        t.r.push(-(2.0f64.powi(i as i32)));
    }
    t
}

#[test]
fn sentinel_windows_match_hand_table() {
    let traj = sentinel_trajectory(5);
    // r = -1, -2, -4, -8, -16
    let returns = returns_to_go(&traj.r).unwrap();
    assert_eq!(returns, vec![-31.0, -30.0, -28.0, -24.0, -16.0]);
    // (t, slot) -> step index, H = 3.
    let table: [(usize, [Option<usize>; 3]); 5] = [
        (0, [None, None, None]),
        (1, [None, None, Some(0)]),
        (2, [None, Some(0), Some(1)]),
        (3, [Some(0), Some(1), Some(2)]),
        (4, [Some(1), Some(2), Some(3)]),
    ];
    for (t, steps) in table {
        let (gt, fp) = build_windows(&traj, &returns, t, 3).unwrap();
        assert_eq!(gt.len(), 3);
        for (j, step) in steps.into_iter().enumerate() {
            assert_eq!(gt.mask[j], step.is_some(), "t {t} slot {j}");
            assert_eq!(fp.mask[j], step.is_some(), "t {t} slot {j}");
            let (g, p) = (&gt.slots[j], &fp.slots[j]);
            let Some(i) = step else {
                assert_eq!(*g, GtSlot::zeros(3));
                assert_eq!(*p, FpSlot::zeros(3));
                continue;
            };
            assert_eq!(g.x.as_slice(), sentinel(1.0, i));
            assert_eq!(g.v.as_slice(), sentinel(2.0, i));
            assert_eq!(g.dx.as_slice(), sentinel(4.0, i));
            assert_eq!(g.k.as_slice(), sentinel(5.0, i));
            assert_eq!(g.f_next.as_slice(), sentinel(3.0, i + 1));
            assert_eq!(p.x.as_slice(), sentinel(1.0, i));
            assert_eq!(p.v.as_slice(), sentinel(2.0, i));
            assert_eq!(p.f.as_slice(), sentinel(3.0, i));
            assert_eq!(p.dx.as_slice(), sentinel(4.0, i));
            assert_eq!(p.f_next.as_slice(), sentinel(3.0, i + 1));
            assert_eq!(p.ret, returns[i]);
        }
    }
}

#[test]
fn augmentation_matches_stated_distribution() {
    let aug = ForceAugment::default();
    assert_eq!((aug.scale_min, aug.scale_max, aug.noise_std), (0.4, 1.4, 1.0));
    let mut rng = rng_from_seed(99);
    let n = 10_000;
    let draws: Vec<f64> = (0..n).map(|_| aug.sample_scale(&mut rng)).collect();
    assert!(draws.iter().all(|s| (0.4..=1.4).contains(s)));
    let mean = draws.iter().sum::<f64>() / n as f64;
    assert!((mean - 0.9).abs() < 3.0 * (1.0 / 12.0 / n as f64).sqrt());
    // Draws spread over the whole range.
    assert!(draws.iter().any(|s| *s < 0.45) && draws.iter().any(|s| *s > 1.35));

    let traj = sentinel_trajectory(n);
    let noisy = augment_force_with(&traj, 1.0, aug.noise_std, &mut rng);
    let std = axis_noise_std(aug.noise_std);
    for axis in 0..3 {
        let d: Vec<f64> = (0..n).map(|i| noisy.f[i][axis] - traj.f[i][axis]).collect();
        let m = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() < 3.0 * std[axis] / (n as f64).sqrt(), "axis {axis} mean {m}");
        assert!((var / (std[axis] * std[axis]) - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "axis {axis} var {var}");
    }
}

#[test]
fn augmentation_scales_forces_only() {
    let traj = sentinel_trajectory(20);
    let mut rng = rng_from_seed(5);
    let out = augment_force_with(&traj, 0.7, 0.0, &mut rng);
    assert_eq!((&out.x, &out.v, &out.dx, &out.k, &out.r), (&traj.x, &traj.v, &traj.dx, &traj.k, &traj.r));
    for (a, b) in out.f.iter().zip(&traj.f) {
        for i in 0..3 {
            assert_eq!(a[i], 0.7 * b[i]);
        }
    }
}

#[test]
fn augment_all_keeps_raw_first() {
    let raw = vec![sentinel_trajectory(4), sentinel_trajectory(6)];
    let aug = ForceAugment::default();
    let all = augment_all(&raw, &aug, 11);
    assert_eq!(all.len(), raw.len() * (1 + aug.copies));
    assert_eq!(&all[..2], &raw[..]);
    assert!(all[2..].iter().all(|t| t.meta.augmentation.is_some()));
    assert_eq!(all, augment_all(&raw, &aug, 11));
}

#[test]
fn scripted_data_spans_returns() {
    let mut env = nominal();
    let trajs = collect(&mut env, &ScriptedConfig::default(), 0..80).unwrap();
    let stats = return_stats(&trajs);
    // Mostly successful, with enough failures for return conditioning.
    assert!((0.4..0.95).contains(&stats.success_fraction), "{stats:?}");
    assert!(stats.q75 - stats.q25 > 0.1 * stats.median.abs(), "{stats:?}");
    for t in &trajs {
        t.validate().unwrap();
        assert!(t.r.iter().all(|r| *r <= 0.0));
        let k_ok = t.k.iter().all(|k| k.iter().all(|v| (10.0..=1000.0).contains(v)));
        assert!(k_ok);
    }
}

#[test]
fn collection_is_deterministic() {
    let a = collect(&mut nominal(), &ScriptedConfig::default(), [3, 4, 5]).unwrap();
    let b = collect(&mut nominal(), &ScriptedConfig::default(), [3, 4, 5]).unwrap();
    assert_eq!(a, b);
    let c = collect(&mut nominal(), &ScriptedConfig::default(), [5]).unwrap();
    assert_eq!(a[2], c[0]);
}

#[test]
fn held_out_split_is_disjoint_and_complete() {
    let trajs: Vec<Trajectory> = (3..13).map(sentinel_trajectory).collect();
    let ds = build_dataset(trajs).unwrap().dataset;
    let (train, held) = ds.split_every(4);
    assert_eq!(train.len() + held.len(), ds.len());
    assert!(!held.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn returns_to_go_are_suffix_sums(r in prop::collection::vec(-1.0f64..0.0, 1..200)) {
        let rtg = returns_to_go(&r).unwrap();
        prop_assert_eq!(rtg.len(), r.len());
        for t in 0..r.len() {
            let brute = r[t..].iter().rev().fold(0.0, |acc, x| x + acc);
            prop_assert_eq!(rtg[t], brute);
        }
    }

    #[test]
    fn windows_hold_at_most_t_steps(len in 1usize..30, h in 1usize..12, seed in 0u64..100) {
        let traj = sentinel_trajectory(len);
        let returns = returns_to_go(&traj.r).unwrap();
        let t = (seed as usize) % len;
        let (gt, fp) = build_windows(&traj, &returns, t, h).unwrap();
        prop_assert_eq!(gt.valid(), t.min(h));
        prop_assert_eq!(fp.valid(), t.min(h));
        // Valid slots are right-aligned and end at step t - 1.
        if t > 0 {
            prop_assert_eq!(gt.slots[h - 1].x.as_slice(), sentinel(1.0, t - 1));
        }
    }

    #[test]
    fn augmentation_scale_is_exact(scale in 0.4f64..1.4, seed in 0u64..100) {
        let traj = sentinel_trajectory(8);
        let out = augment_force_with(&traj, scale, 0.0, &mut rng_from_seed(seed));
        for (a, b) in out.f.iter().zip(&traj.f) {
            for i in 0..3 {
                prop_assert_eq!(a[i], scale * b[i]);
            }
        }
    }
}
