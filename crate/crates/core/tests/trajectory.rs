use cast_core::trajectory::{
    extract_features, fit_quadratic, fit_spline, read_series_csv, spline_cv_scores, trajectory_report, EffectSeries,
};
use cast_core::Estimand;
use proptest::prelude::*;

const TABLE_2: &str = "\
months,ate_sp,se_sp,ate_rmst,se_rmst
12,0.099,0.049,0.44,0.26
24,0.141,0.053,1.88,0.80
36,0.152,0.058,3.58,1.46
48,0.178,0.072,5.80,2.31
60,0.168,0.071,7.39,2.73
72,0.148,0.075,8.38,3.52
84,0.156,0.077,11.08,4.76
96,0.143,0.071,13.89,5.90
108,0.129,0.068,14.76,6.16
120,0.100,0.063,16.11,6.92
";

fn grid() -> Vec<f64> {
    (1..=10).map(|k| 12.0 * f64::from(k)).collect()
}

fn series(h: Vec<f64>, y: Vec<f64>, se: Vec<f64>) -> EffectSeries {
    EffectSeries::new(h, y, se, Estimand::Sp).unwrap()
}

fn table2_sp() -> EffectSeries {
    let all = read_series_csv(TABLE_2.as_bytes(), Estimand::Sp).unwrap();
    all.into_iter().find(|s| s.estimand == Estimand::Sp).unwrap()
}

#[test]
fn table2_report() {
    let both = read_series_csv(TABLE_2.as_bytes(), Estimand::Sp).unwrap();
    assert_eq!(both.len(), 2);
    let report = trajectory_report(&both).unwrap();
    let sp = report.get(Estimand::Sp).unwrap();
    let peak = sp.summary.t_peak.unwrap();
    let max = sp.summary.max_effect.unwrap();
    assert!((50.0..=65.0).contains(&peak), "quadratic peak {peak}");
    assert!((0.15..=0.19).contains(&max), "max effect {max}");
    let spline_peak = sp.summary.spline_peak.unwrap();
    assert!((48.0..=72.0).contains(&spline_peak), "spline peak {spline_peak}");
    assert_eq!(sp.curve.len(), 109);
    assert_eq!((sp.curve[0].t, sp.curve[108].t), (12.0, 120.0));
    for pt in &sp.curve {
        assert!(pt.q_lo <= pt.quadratic && pt.quadratic <= pt.q_hi);
    }
    // cumulative RMST differences keep rising: the spline maximum sits on
    // the boundary
    let r = report.get(Estimand::Rmst).unwrap();
    assert!(r.summary.spline_peak.is_none());
}

#[test]
fn spline_cv_choice_is_optimal_on_its_grid() {
    let s = table2_sp();
    let fit = fit_spline(&s).unwrap();
    let scores = spline_cv_scores(&s).unwrap();
    assert_eq!(scores.len(), 50);
    let best = scores.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    assert_eq!(fit.cv_score, best);
    let first_best = scores.iter().filter(|x| x.1 == best).map(|x| x.0).fold(f64::INFINITY, f64::min);
    assert_eq!(fit.lambda, first_best);
}

#[test]
fn single_curvature_change_gives_one_inflection() {
    let h = grid();
    let y = h.iter().map(|t| ((t - 66.0) / 20.0).tanh()).collect();
    let fit = fit_spline(&series(h, y, vec![0.01; 10])).unwrap();
    let f = extract_features(&fit);
    assert_eq!(f.inflections.len(), 1, "{:?}", f.inflections);
    assert!((60.0..=72.0).contains(&f.inflections[0]), "{:?}", f.inflections);
    let t = f.inflections[0];
    assert!(fit.second_derivative(t - 1.0) * fit.second_derivative(t + 1.0) < 0.0);
    assert_eq!(f.phases.len(), 2);
}

fn noisy_curve() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        0.05f64..0.3,
        30.0f64..90.0,
        proptest::collection::vec(-0.02f64..0.02, 10),
        proptest::collection::vec(0.02f64..0.1, 10),
    )
        .prop_map(|(amp, peak, noise, ses)| {
            let y = grid().iter().zip(&noise).map(|(t, e)| amp * (1.0 - ((t - peak) / 80.0).powi(2)) + e).collect();
            (y, ses)
        })
}

proptest! {
    #[test]
    fn quadratics_are_recovered_under_any_weights(
        b0 in -0.5f64..0.5, b1 in -0.01f64..0.01, b2 in -1e-4f64..1e-4,
        ses in proptest::collection::vec(0.001f64..1.0, 10),
    ) {
        let y = grid().iter().map(|t| b0 + b1 * t + b2 * t * t).collect();
        let f = fit_quadratic(&series(grid(), y, ses)).unwrap();
        prop_assert!((f.coefficients[0] - b0).abs() < 1e-10);
        prop_assert!((f.coefficients[1] - b1).abs() < 1e-10);
        prop_assert!((f.coefficients[2] - b2).abs() < 1e-10);
    }

    #[test]
    fn peak_satisfies_the_vertex_identity((y, ses) in noisy_curve()) {
        let f = fit_quadratic(&series(grid(), y, ses)).unwrap();
        let [b0, b1, b2] = f.coefficients;
        if let Some(t) = f.t_peak {
            prop_assert!(b2 < 0.0);
            prop_assert!((t * 2.0 * b2 + b1).abs() <= 1e-12 * (1.0 + b1.abs()));
            prop_assert_eq!(f.max_effect.unwrap(), b0 + b1 * t + b2 * t * t);
        } else {
            prop_assert!(b2 >= 0.0);
        }
        if let Some(hl) = f.half_life {
            prop_assert!(hl > 0.0);
        }
    }

    #[test]
    fn scaling_effects_scales_the_fit((y, ses) in noisy_curve(), c in 0.1f64..10.0) {
        let base = fit_quadratic(&series(grid(), y.clone(), ses.clone())).unwrap();
        let scaled = fit_quadratic(&series(grid(), y.iter().map(|v| v * c).collect(), ses)).unwrap();
        for k in 0..3 {
            prop_assert!((scaled.coefficients[k] - c * base.coefficients[k]).abs() <= 1e-9 * c * (1.0 + base.coefficients[k].abs()));
        }
        match (base.t_peak, scaled.t_peak) {
            (Some(a), Some(b)) => {
                prop_assert!((a - b).abs() < 1e-8);
                prop_assert!((scaled.max_effect.unwrap() - c * base.max_effect.unwrap()).abs() < 1e-9 * c);
            }
            (None, None) => {}
            other => prop_assert!(false, "peak mismatch {:?}", other),
        }
        match (base.half_life, scaled.half_life) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-4),
            (None, None) => {}
            other => prop_assert!(false, "half-life mismatch {:?}", other),
        }
    }

    #[test]
    fn shifting_time_shifts_features((y, ses) in noisy_curve(), shift in -10.0f64..40.0) {
        let base_s = series(grid(), y.clone(), ses.clone());
        let moved_s = series(grid().iter().map(|t| t + shift).collect(), y, ses);
        let (a, b) = (fit_quadratic(&base_s).unwrap(), fit_quadratic(&moved_s).unwrap());
        match (a.t_peak, b.t_peak) {
            (Some(p), Some(q)) => prop_assert!((q - p - shift).abs() < 1e-8),
            (None, None) => {}
            other => prop_assert!(false, "peak mismatch {:?}", other),
        }
        let (fa, fb) = (extract_features(&fit_spline(&base_s).unwrap()), extract_features(&fit_spline(&moved_s).unwrap()));
        prop_assert_eq!(fa.inflections.len(), fb.inflections.len());
        for (p, q) in fa.inflections.iter().zip(&fb.inflections) {
            prop_assert!((q - p - shift).abs() < 1e-6);
        }
        match (fa.peak, fb.peak) {
            (Some(p), Some(q)) => prop_assert!((q - p - shift).abs() < 2e-3),
            (None, None) => {}
            other => prop_assert!(false, "spline peak mismatch {:?}", other),
        }
    }

    #[test]
    fn a_precise_point_pins_the_fit((y, mut ses) in noisy_curve(), k in 0usize..10) {
        ses[k] = 1e-9;
        let h = grid();
        let f = fit_quadratic(&series(h.clone(), y.clone(), ses)).unwrap();
        prop_assert!((f.eval(h[k]) - y[k]).abs() < 1e-6);
    }
}
