use se3flow::geometry::{d_geo, exp_map, geodesic_interp};
use se3flow::integrator::{integrate, straightness, FnField, SolverSpec};
use se3flow::{Pose, Twist, Vec3};

const A: f64 = 1.3;

fn z0() -> Pose {
    exp_map(&Twist::from_array([0.2, -0.4, 0.1, 0.5, 1.0, -0.3]))
}

fn err(a: &Pose, b: &Pose) -> f64 {
    (a.to_matrix() - b.to_matrix()).norm()
}

/// Least-squares slope of log(err) against log(N).
fn slope(ns: &[usize], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    -num / den
}

const NS: [usize; 5] = [4, 8, 16, 32, 64];

#[test]
fn euler_is_first_order_on_a_commuting_field() {
    // ξ(t) = (0, 0, a·t, 0, 0, 0) integrates to exp((0, 0, a/2, 0, 0, 0))
    let field =
        FnField::spatial(|_: &Pose, t: f64| Twist::from_array([0.0, 0.0, A * t, 0.0, 0.0, 0.0]));
    let exact = exp_map(&Twist::from_array([0.0, 0.0, A / 2.0, 0.0, 0.0, 0.0])).compose(&z0());
    let errs: Vec<f64> = NS
        .iter()
        .map(|&n| {
            err(
                integrate(&field, &z0(), &SolverSpec::euler(n))
                    .unwrap()
                    .terminal(),
                &exact,
            )
        })
        .collect();
    let s = slope(&NS, &errs);
    assert!((s - 1.0).abs() <= 0.3, "euler slope {s}");
}

#[test]
fn rk4_is_fourth_order_on_a_commuting_field() {
    // linear-in-t fields are integrated exactly by RK4, so use ξ(t) ∝ eᵗ
    let field = FnField::spatial(|_: &Pose, t: f64| {
        Twist::from_array([0.0, 0.0, A * t.exp(), 0.0, 0.0, 0.0])
    });
    let total = A * (std::f64::consts::E - 1.0);
    let exact = exp_map(&Twist::from_array([0.0, 0.0, total, 0.0, 0.0, 0.0])).compose(&z0());
    let errs: Vec<f64> = NS
        .iter()
        .map(|&n| {
            err(
                integrate(&field, &z0(), &SolverSpec::rk4(n))
                    .unwrap()
                    .terminal(),
                &exact,
            )
        })
        .collect();
    let s = slope(&NS, &errs);
    assert!((s - 4.0).abs() <= 0.5, "rk4 slope {s}, errors {errs:?}");
}

#[test]
fn constant_fields_are_exact_at_any_budget() {
    let xi = Twist::from_array([0.7, -0.3, 0.4, 1.0, 2.0, -0.5]);
    let field = FnField::spatial(move |_: &Pose, _| xi);
    let exact = exp_map(&xi).compose(&z0());
    let body = FnField::body(move |_: &Pose, _| xi);
    let body_exact = z0().compose(&exp_map(&xi));
    for n in [1, 2, 3, 7, 50, 100] {
        for spec in [
            SolverSpec::euler(n),
            SolverSpec::rk4(n),
            SolverSpec::default().with_steps(n),
        ] {
            let path = integrate(&field, &z0(), &spec).unwrap();
            assert!(err(path.terminal(), &exact) < 1e-9, "{spec:?}");
            let path = integrate(&body, &z0(), &spec).unwrap();
            assert!(err(path.terminal(), &body_exact) < 1e-9, "body {spec:?}");
        }
    }
}

#[test]
fn rk45_agrees_with_dense_rk4() {
    // smooth, state-dependent, non-commuting
    let field = FnField::spatial(|z: &Pose, t: f64| {
        let p = z.translation();
        Twist::new(
            Vec3::new(0.5 * (2.0 * t).cos(), 0.3 * p.x, -0.2 * p.y),
            Vec3::new(0.4 * p.z.sin(), 1.0 - t, 0.2 * p.x * t),
        )
    });
    let rtol = 1e-6;
    let dense = integrate(&field, &z0(), &SolverSpec::rk4(1024)).unwrap();
    let adaptive = integrate(&field, &z0(), &SolverSpec::rk45(rtol, 1e-8)).unwrap();
    let gap = d_geo(dense.terminal(), adaptive.terminal()).unwrap();
    assert!(gap < 10.0 * rtol, "gap {gap:e}");
    let coarse = integrate(&field, &z0(), &SolverSpec::rk4(100)).unwrap();
    assert!(d_geo(coarse.terminal(), adaptive.terminal()).unwrap() < 1e-3);
    for p in &adaptive.poses {
        assert!(p.rotation().orthonormality_error() < 1e-9);
    }
    assert!(straightness(&adaptive).unwrap() > 0.0);
}

#[test]
fn geodesic_samples_are_straight() {
    let h1 = exp_map(&Twist::from_array([0.9, 0.2, -0.5, 2.0, 0.0, 1.0])).compose(&z0());
    let delta = se3flow::log_map(&h1.compose(&z0().inverse())).unwrap();
    let field = FnField::spatial(move |_: &Pose, _| delta);
    let path = integrate(&field, &z0(), &SolverSpec::rk4(16)).unwrap();
    assert!(straightness(&path).unwrap() < 1e-9);
    for (t, p) in path.times.iter().zip(&path.poses) {
        assert!(d_geo(p, &geodesic_interp(&z0(), &h1, *t).unwrap()).unwrap() < 1e-9);
    }
}
