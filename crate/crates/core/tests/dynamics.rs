use approx::assert_relative_eq;
use forcegain_core::dynamics::*;
use proptest::prelude::*;

const DT: f64 = CONTROL_DT;

fn run(m: &[f64], k: &[f64], f: &[f64], setpoint: &[f64], steps: usize, dt: f64) -> Vec<AdmittanceState> {
    let gains = GainSet::new(m, k).unwrap();
    let mut s = AdmittanceState::at_rest(Pose::zeros(m.len()));
    let desired = DesiredMotion::hold(Pose::from_slice(setpoint).unwrap());
    let wrench = Wrench::from_slice(f).unwrap();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        s = admittance_step(&s, &desired, &wrench, &gains, dt).unwrap();
        out.push(s);
    }
    out
}

/// Closed form of the critically-overdamped response from rest with
/// D = 4·sqrt(m·k): both poles are real, at sqrt(k/m)·(−2 ± √3).
fn analytic(m: f64, k: f64, f: f64, t: f64) -> f64 {
    let w = (k / m).sqrt();
    let (r1, r2) = (w * (-2.0 + 3f64.sqrt()), w * (-2.0 - 3f64.sqrt()));
    f / k * (1.0 - (r2 * (r1 * t).exp() - r1 * (r2 * t).exp()) / (r2 - r1))
}

#[test]
fn six_axis_steady_state_is_compliance() {
    let m = [1.0, 2.0, 0.5, 1.0, 3.0, 1.5];
    let k = [50.0, 200.0, 800.0, 20.0, 400.0, 1000.0];
    let f = [3.0, -7.0, 12.0, 0.5, -0.2, 9.0];
    let states = run(&m, &k, &f, &[0.0; 6], 40_000, DT);
    let end = states.last().unwrap();
    for i in 0..6 {
        assert_relative_eq!(end.pose[i], f[i] / k[i], max_relative = 1e-6);
    }
}

#[test]
fn matches_closed_form_and_converges_with_dt() {
    let (m, k, f) = (1.0, 300.0, 10.0);
    let horizon = 0.5;
    let mut errors = Vec::new();
    for dt in [DT, DT / 2.0, DT / 4.0] {
        let n = (horizon / dt).round() as usize;
        let states = run(&[m], &[k], &[f], &[0.0], n, dt);
        let err = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.pose[0] - analytic(m, k, f, (i + 1) as f64 * dt)).abs())
            .fold(0.0, f64::max);
        errors.push(err);
    }
    assert!(errors[0] < 0.01 * f / k, "{errors:?}");
    // First-order method: halving dt roughly halves the error.
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..2.5).contains(&ratio), "{errors:?}");
    }
}

#[test]
fn axes_are_decoupled() {
    let both = run(&[1.0, 2.0], &[100.0, 400.0], &[5.0, -3.0], &[0.0, 0.0], 500, DT);
    let x_only = run(&[1.0], &[100.0], &[5.0], &[0.0], 500, DT);
    let z_only = run(&[2.0], &[400.0], &[-3.0], &[0.0], 500, DT);
    for i in 0..500 {
        assert_eq!(both[i].pose[0], x_only[i].pose[0]);
        assert_eq!(both[i].pose[1], z_only[i].pose[0]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn force_step_never_overshoots(m in 0.5f64..5.0, k in 10.0f64..1000.0, f in -50.0f64..50.0) {
        prop_assume!(f.abs() > 1e-3);
        let target = f / k;
        for s in run(&[m], &[k], &[f], &[0.0], 4000, DT) {
            prop_assert!(s.pose[0] * target.signum() <= target.abs() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn setpoint_step_never_overshoots(m in 0.5f64..5.0, k in 10.0f64..1000.0, step in -0.02f64..0.02) {
        prop_assume!(step.abs() > 1e-6);
        for s in run(&[m], &[k], &[0.0], &[step], 4000, DT) {
            prop_assert!(s.pose[0] * step.signum() <= step.abs() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn response_is_linear_in_force(
        m in 0.5f64..5.0, k in 10.0f64..1000.0, f1 in -20.0f64..20.0, f2 in -20.0f64..20.0,
    ) {
        let a = run(&[m], &[k], &[f1], &[0.0], 300, DT);
        let b = run(&[m], &[k], &[f2], &[0.0], 300, DT);
        let ab = run(&[m], &[k], &[f1 + f2], &[0.0], 300, DT);
        for i in 0..300 {
            let sum = a[i].pose[0] + b[i].pose[0];
            prop_assert!((ab[i].pose[0] - sum).abs() <= 1e-12 * (1.0 + sum.abs()) + 1e-15);
        }
    }

    #[test]
    fn damping_is_four_root_mk(m in 0.01f64..10.0, k in 0.1f64..5000.0) {
        let g = GainSet::new(&[m], &[k]).unwrap();
        prop_assert!((g.damping()[0] - 4.0 * (m * k).sqrt()).abs() <= 1e-12 * g.damping()[0]);
    }
}
