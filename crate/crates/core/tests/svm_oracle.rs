mod support;

use motorintent::svm::{calibrate, train, train_with_duals, SvmModel, SvmParams, LEFT, RIGHT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::dual_qp_oracle;

/// KKT conditions of a trained machine on its training set.
fn assert_kkt(model: &SvmModel, alphas: &[f64], xs: &[Vec<f64>], ys: &[f64], tol: f64) {
    let c = model.c;
    let balance: f64 = alphas.iter().zip(ys).map(|(a, y)| a * y).sum();
    assert!(balance.abs() <= 1e-8, "sum alpha*y = {balance}");
    for ((a, x), y) in alphas.iter().zip(xs).zip(ys) {
        assert!((0.0..=c).contains(a), "alpha {a} outside [0, {c}]");
        let margin = y * model.decision_value(x).unwrap();
        if *a <= 0.0 {
            assert!(margin >= 1.0 - tol, "alpha = 0 but margin {margin}");
        } else if *a >= c {
            assert!(margin <= 1.0 + tol, "alpha = C but margin {margin}");
        } else {
            assert!(
                (margin - 1.0).abs() <= tol,
                "free vector with margin {margin}"
            );
        }
    }
}

fn random_problem(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
    loop {
        let n = rng.random_range(2..=10);
        let d = rng.random_range(1..=4);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let ys: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.5) { RIGHT } else { LEFT })
            .collect();
        if ys.contains(&LEFT) && ys.contains(&RIGHT) {
            return (xs, ys);
        }
    }
}

#[test]
fn xor_is_learned_and_matches_oracle() {
    let xs = vec![
        vec![0.0, 0.0],
        vec![1.0, 1.0],
        vec![0.0, 1.0],
        vec![1.0, 0.0],
    ];
    let ys = vec![LEFT, LEFT, RIGHT, RIGHT];
    let params = SvmParams {
        c: 10.0,
        gamma: 1.0,
        ..Default::default()
    };
    let (model, alphas) = train_with_duals(&xs, &ys, &params).unwrap();
    for (x, y) in xs.iter().zip(&ys) {
        assert_eq!(model.predict_label(x).unwrap(), *y);
    }
    let oracle = dual_qp_oracle(&xs, &ys, 10.0, 1.0);
    assert!((model.dual_objective() - oracle).abs() <= 1e-4 * oracle.abs());
    assert_kkt(&model, &alphas, &xs, &ys, params.tol);
}

#[test]
fn random_small_problems_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let (xs, ys) = random_problem(&mut rng);
        let c = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let gamma = [0.5, 1.0, 2.0][rng.random_range(0..3)];
        let params = SvmParams {
            c,
            gamma,
            ..Default::default()
        };
        let (model, alphas) = train_with_duals(&xs, &ys, &params).unwrap();
        assert!(model.converged);
        let oracle = dual_qp_oracle(&xs, &ys, c, gamma);
        let rel = (model.dual_objective() - oracle).abs() / oracle.abs().max(1e-12);
        assert!(
            rel <= 1e-4,
            "smo {} vs oracle {oracle}",
            model.dual_objective()
        );
        assert_kkt(&model, &alphas, &xs, &ys, params.tol);
    }
}

#[test]
fn decision_value_matches_naive_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| {
            if x[0] + x[1] * x[2] > 0.0 {
                RIGHT
            } else {
                LEFT
            }
        })
        .collect();
    let model = train(
        &xs,
        &ys,
        &SvmParams {
            c: 1.0,
            gamma: 0.5,
            ..Default::default()
        },
    )
    .unwrap();
    for _ in 0..20 {
        let s: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut naive = model.bias;
        for (sv, coef) in model.support_vectors.iter().zip(&model.dual_coeffs) {
            let mut d2 = 0.0;
            for k in 0..6 {
                d2 += (s[k] - sv[k]).powi(2);
            }
            naive += coef * (-0.5 * d2).exp();
        }
        assert!((model.decision_value(&s).unwrap() - naive).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (xs, ys) = random_problem(&mut rng);
    let p = SvmParams::default();
    assert_eq!(train(&xs, &ys, &p).unwrap(), train(&xs, &ys, &p).unwrap());
}

#[test]
fn small_cache_gives_same_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let xs: Vec<Vec<f64>> = (0..60)
        .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| if x[0] * x[1] > 0.0 { RIGHT } else { LEFT })
        .collect();
    let full = train(
        &xs,
        &ys,
        &SvmParams {
            c: 5.0,
            gamma: 2.0,
            ..Default::default()
        },
    )
    .unwrap();
    let tiny = train(
        &xs,
        &ys,
        &SvmParams {
            c: 5.0,
            gamma: 2.0,
            cache_bytes: 8 * 60 * 3,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(full, tiny);
}

#[test]
fn calibrated_probabilities_are_valid_and_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let xs: Vec<Vec<f64>> = (0..90)
        .map(|i| {
            let shift = if i % 2 == 0 { 0.6 } else { -0.6 };
            (0..4)
                .map(|_| shift + rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let ys: Vec<f64> = (0..90)
        .map(|i| if i % 2 == 0 { RIGHT } else { LEFT })
        .collect();
    let params = SvmParams {
        c: 1.0,
        gamma: 0.5,
        ..Default::default()
    };
    let model = train(&xs, &ys, &params).unwrap();
    let model = calibrate(&model, &xs, &ys, None, &params).unwrap();
    let platt = model.platt.unwrap();
    assert!(platt.a < 0.0);

    let mut last = -1.0;
    for k in -30..=30 {
        let f = k as f64 / 10.0;
        let p = platt.p_right(f);
        assert!(p >= last);
        last = p;
    }
    for x in &xs {
        let s = model.predict_proba(x).unwrap();
        assert!((s.p_left + s.p_right - 1.0).abs() <= 1e-9);
        assert!((0.0..=1.0).contains(&s.p_left) && (0.0..=1.0).contains(&s.p_right));
    }
}
