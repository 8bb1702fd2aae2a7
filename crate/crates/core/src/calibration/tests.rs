use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::linalg::Mat;
use crate::rng;

fn gaussian_mat(r: &mut rng::StreamRng, rows: usize, cols: usize) -> Mat {
    Mat {
        rows,
        cols,
        data: (0..rows * cols).map(|_| r.sample(StandardNormal)).collect(),
    }
}

fn random_pd(r: &mut rng::StreamRng, n: usize) -> Mat {
    let a = gaussian_mat(r, n, n);
    let mut s = a.transpose().matmul(&a);
    for i in 0..n {
        s.set(i, i, s.get(i, i) + 0.1);
    }
    s
}

/// Gauss–Jordan inverse with partial pivoting.
fn explicit_inverse(m: &Mat) -> Mat {
    let n = m.rows;
    let mut a = m.clone();
    let mut inv = Mat::identity(n);
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a.get(i, c).abs().total_cmp(&a.get(j, c).abs()))
            .unwrap();
        for k in 0..n {
            let (x, y) = (a.get(c, k), a.get(p, k));
            a.set(c, k, y);
            a.set(p, k, x);
            let (x, y) = (inv.get(c, k), inv.get(p, k));
            inv.set(c, k, y);
            inv.set(p, k, x);
        }
        let d = a.get(c, c);
        for k in 0..n {
            a.set(c, k, a.get(c, k) / d);
            inv.set(c, k, inv.get(c, k) / d);
        }
        for i in 0..n {
            if i != c {
                let f = a.get(i, c);
                for k in 0..n {
                    a.set(i, k, a.get(i, k) - f * a.get(c, k));
                    inv.set(i, k, inv.get(i, k) - f * inv.get(c, k));
                }
            }
        }
    }
    inv
}

/// Random orthogonal matrix by Gram–Schmidt on a Gaussian matrix.
fn random_orthogonal(r: &mut rng::StreamRng, n: usize) -> Mat {
    let a = gaussian_mat(r, n, n);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut v = a.row(i).to_vec();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    Mat::from_rows(&q)
}

#[test]
fn covariance_of_square_corners() {
    let s = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![2.0, 2.0]];
    let (mu, cov) = mean_and_covariance(&s, 1e-6).unwrap();
    assert_eq!(mu, vec![1.0, 1.0]);
    let shift = 1e-6 * (8.0 / 3.0) / 2.0;
    assert!((cov.get(0, 0) - (4.0 / 3.0 + shift)).abs() < 1e-15);
    assert!((cov.get(1, 1) - (4.0 / 3.0 + shift)).abs() < 1e-15);
    assert_eq!(cov.get(0, 1), 0.0);
}

#[test]
fn identical_samples_leave_only_the_ridge() {
    let s = vec![vec![1.0, 2.0, 3.0]; 2];
    let (_, cov) = mean_and_covariance(&s, 1e-6).unwrap();
    assert_eq!(cov, {
        let mut m = Mat::identity(3);
        m.data.iter_mut().for_each(|x| *x *= 1e-6);
        m
    });
    let stats = fit_stats(&s, &s, 1e-6).unwrap();
    assert!(stats.scorer().is_ok());
}

#[test]
fn small_populations_are_rejected() {
    let one = vec![vec![1.0, 2.0]];
    let two = vec![vec![1.0, 2.0], vec![0.0, 1.0]];
    let err = fit_stats(&two, &one, 1e-6).unwrap_err();
    assert!(matches!(err, Error::InsufficientData(ref m) if m.contains("incorrect")));
    assert!(fit_stats(&two, &two, 0.0).is_err());
}

#[test]
fn mahalanobis_examples() {
    let eye = Mat::identity(2);
    assert_eq!(mahalanobis(&[1.0, 2.0], &[1.0, 2.0], &eye).unwrap(), 0.0);
    assert!((mahalanobis(&[4.0, 6.0], &[1.0, 2.0], &eye).unwrap() - 5.0).abs() < 1e-15);
    let not_pd = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
    assert!(matches!(
        mahalanobis(&[0.0, 0.0], &[1.0, 1.0], &not_pd),
        Err(Error::Numerical(_))
    ));
}

#[test]
fn mahalanobis_matches_explicit_inverse() {
    let mut r = rng::stream(7, "maha");
    for _ in 0..100 {
        let n = r.gen_range(1..8);
        let sigma = random_pd(&mut r, n);
        let v: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let mu: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let diff: Vec<f64> = v.iter().zip(&mu).map(|(a, b)| a - b).collect();
        let inv = explicit_inverse(&sigma);
        let oracle = inv
            .matvec(&diff)
            .iter()
            .zip(&diff)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .sqrt();
        let got = mahalanobis(&v, &mu, &sigma).unwrap();
        assert!((got - oracle).abs() <= 1e-6 * oracle.max(1e-12), "{got} vs {oracle}");
    }
}

#[test]
fn mahalanobis_is_orthogonally_invariant() {
    let mut r = rng::stream(8, "rotation");
    for _ in 0..20 {
        let n = 5;
        let sigma = random_pd(&mut r, n);
        let q = random_orthogonal(&mut r, n);
        let v: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let mu: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let rotated_sigma = q.matmul(&sigma).matmul(&q.transpose());
        let a = mahalanobis(&v, &mu, &sigma).unwrap();
        let b = mahalanobis(&q.matvec(&v), &q.matvec(&mu), &rotated_sigma).unwrap();
        assert!((a - b).abs() <= 1e-6 * a.max(1.0));
    }
}

#[test]
fn distances_separate_populations() {
    let mut r = rng::stream(9, "pops");
    let draw = |r: &mut rng::StreamRng, shift: f64| -> Vec<Vec<f64>> {
        (0..50)
            .map(|_| (0..3).map(|_| shift + r.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    };
    let corr = draw(&mut r, 0.0);
    let inc = draw(&mut r, 3.0);
    let scorer = fit_stats(&corr, &inc, DEFAULT_RIDGE).unwrap().scorer().unwrap();
    let (dc, di) = scorer.distances(&[0.0, 0.0, 0.0]).unwrap();
    assert!(dc < di);
    let (dc, di) = scorer.distances(&[3.0, 3.0, 3.0]).unwrap();
    assert!(dc > di);
}

fn separable() -> (Vec<Vec<f64>>, Vec<u8>) {
    let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
    let y = (0..40).map(|i| u8::from(i >= 15)).collect();
    (x, y)
}

#[test]
fn boosting_loss_decreases_on_separable_data() {
    let (x, y) = separable();
    let m = fit_gbdt(&x, &y, &GbdtParams::default()).unwrap();
    assert_eq!(m.trees.len(), 50);
    assert_eq!(m.train_loss.len(), 51);
    for w in m.train_loss.windows(2) {
        assert!(w[1] <= w[0], "{} then {}", w[0], w[1]);
    }
    assert!(m.trees.iter().all(|t| t.depth() <= 2));
    assert_eq!(m.trees[0].nodes[0].threshold, 14.5);
    assert!(m.predict_logit(&[0.0]) < m.predict_logit(&[39.0]));
}

#[test]
fn constant_features_predict_the_base_rate() {
    let x = vec![vec![1.0, 1.0]; 10];
    let y = vec![1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
    let m = fit_gbdt(&x, &y, &GbdtParams::default()).unwrap();
    assert!(m.trees.iter().all(|t| t.nodes.len() == 1));
    let expect = (0.3f64 / 0.7).ln();
    assert!((m.predict_logit(&[1.0, 1.0]) - expect).abs() < 1e-12);
    assert!((m.predict_logit(&[-5.0, 9.0]) - expect).abs() < 1e-12);
}

#[test]
fn splits_prefer_lowest_feature_then_lowest_threshold() {
    // both features separate the labels identically
    let x: Vec<Vec<f64>> = (0..8).map(|i| vec![f64::from(i / 4), f64::from(i / 4)]).collect();
    let y: Vec<u8> = (0..8).map(|i| u8::from(i >= 4)).collect();
    let m = fit_gbdt(
        &x,
        &y,
        &GbdtParams {
            rounds: 1,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(m.trees[0].nodes[0].feature, Some(0));
    assert_eq!(m.trees[0].nodes[0].threshold, 0.5);
}

#[test]
fn single_class_rows_are_insufficient() {
    let x = vec![vec![1.0], vec![2.0]];
    assert!(matches!(
        fit_gbdt(&x, &[1, 1], &GbdtParams::default()),
        Err(Error::InsufficientData(_))
    ));
    assert!(matches!(
        fit_logistic(&x, &[0, 0], &LogisticParams::default()),
        Err(Error::InsufficientData(_))
    ));
}

/// Walks the serialized tree arrays independently of `Tree::predict`.
fn json_walk(model: &serde_json::Value, x: &[f64]) -> f64 {
    let mut total = model["base_score"].as_f64().unwrap();
    for tree in model["trees"].as_array().unwrap() {
        let nodes = tree["nodes"].as_array().unwrap();
        let mut node = &nodes[0];
        while let Some(f) = node["feature"].as_u64() {
            let next = if x[f as usize] < node["threshold"].as_f64().unwrap() {
                node["left"].as_u64().unwrap()
            } else {
                node["right"].as_u64().unwrap()
            };
            node = &nodes[next as usize];
        }
        total += node["value"].as_f64().unwrap();
    }
    total
}

#[test]
fn predictions_match_an_independent_tree_walk() {
    let mut r = rng::stream(10, "walk");
    let x: Vec<Vec<f64>> = (0..80)
        .map(|_| (0..3).map(|_| r.sample(StandardNormal)).collect())
        .collect();
    let y: Vec<u8> = x
        .iter()
        .map(|v| u8::from(v[0] + 0.5 * v[2] + 0.3 * r.sample::<f64, _>(StandardNormal) > 0.0))
        .collect();
    let m = fit_gbdt(&x, &y, &GbdtParams::default()).unwrap();
    let json = serde_json::to_value(&m).unwrap();
    for _ in 0..200 {
        let q: Vec<f64> = (0..3).map(|_| 2.0 * r.sample::<f64, _>(StandardNormal)).collect();
        assert_eq!(m.predict_logit(&q), json_walk(&json, &q));
    }
}

#[test]
fn fitting_is_deterministic() {
    let (x, y) = separable();
    let a = fit_gbdt(&x, &y, &GbdtParams::default()).unwrap();
    let b = fit_gbdt(&x, &y, &GbdtParams::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn calibrated_confidence_examples() {
    let zero = Calibrator::Gbdt(GbdtModel {
        n_features: 3,
        params: GbdtParams {
            rounds: 0,
            ..Default::default()
        },
        base_score: 0.0,
        trees: vec![],
        train_loss: vec![],
    });
    assert_eq!(calibrate_token(&zero, 1.0, 2.0, 0.3), 0.5);
    let extreme = Calibrator::Gbdt(GbdtModel {
        base_score: 1e3,
        ..match zero {
            Calibrator::Gbdt(ref m) => m.clone(),
            _ => unreachable!(),
        }
    });
    assert_eq!(calibrate_token(&extreme, 0.0, 0.0, 0.0), 1.0 - 1e-6);
}

#[test]
fn response_uncertainty_examples() {
    assert!((response_uncertainty(&[1.0 - 1e-6; 4]).unwrap() - 1.0).abs() < 1e-5);
    assert!((response_uncertainty(&[0.5, 0.5]).unwrap() - 2.0).abs() < 1e-12);
    assert!((response_uncertainty(&[0.5, 0.125]).unwrap() - 4.0).abs() < 1e-12);
    assert!(response_uncertainty(&[]).is_err());
}

#[test]
fn logistic_orders_like_the_signal() {
    let mut r = rng::stream(11, "logit");
    let x: Vec<Vec<f64>> = (0..200)
        .map(|_| vec![r.sample(StandardNormal), 100.0 * r.sample::<f64, _>(StandardNormal)])
        .collect();
    let y: Vec<u8> = x
        .iter()
        .map(|v| u8::from(v[0] + 0.5 * r.sample::<f64, _>(StandardNormal) > 0.0))
        .collect();
    let m = fit_logistic(&x, &y, &LogisticParams::default()).unwrap();
    assert!(m.coef[0] > 1.0);
    assert!(m.coef[1].abs() < m.coef[0] / 4.0);
    assert!(m.predict_logit(&[2.0, 0.0]) > m.predict_logit(&[-2.0, 0.0]));
}

#[test]
fn calibrator_file_roundtrip() {
    let (x, y) = separable();
    for kind in [CalibratorKind::Gbdt, CalibratorKind::Logistic] {
        let params = CalibratorParams {
            kind,
            ..Default::default()
        };
        let m = fit_calibrator(&x, &y, &params).unwrap();
        let file = CalibratorFile::new(m, false);
        let text = serde_json::to_string(&file).unwrap();
        let back: CalibratorFile = serde_json::from_str(&text).unwrap();
        back.check().unwrap();
        assert_eq!(back, file);
    }
    let mut bad = CalibratorFile::new(fit_calibrator(&x, &y, &CalibratorParams::default()).unwrap(), false);
    bad.version = 99;
    assert!(bad.check().is_err());
}

#[test]
fn responses_group_tokens_by_id() {
    let corr = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    let inc = vec![vec![5.0, 5.0], vec![6.0, 5.0], vec![5.0, 6.0]];
    let scorer = fit_stats(&corr, &inc, 1e-3).unwrap().scorer().unwrap();
    let model = Calibrator::Gbdt(GbdtModel {
        n_features: 3,
        params: GbdtParams::default(),
        base_score: 0.0,
        trees: vec![],
        train_loss: vec![],
    });
    let row = |id: &str, step, confidence| TokenRow {
        id: id.into(),
        step,
        confidence,
        features: vec![0.5, 0.5],
        j: 1,
    };
    let rows = vec![row("b", 1, 0.5), row("a", 0, 0.25), row("b", 0, 0.5)];
    let scores = score_responses(&model, &scorer, &rows, false).unwrap();
    assert_eq!(scores.len(), 2);
    assert_eq!(scores[0].id, "a");
    assert!((scores[0].u_raw - 4.0).abs() < 1e-12);
    assert!((scores[1].u - 2.0).abs() < 1e-12);
    let mut mixed = rows.clone();
    mixed[0].j = 0;
    assert!(score_responses(&model, &scorer, &mixed, false).is_err());
}

proptest! {
    #[test]
    fn calibrated_confidence_stays_in_the_clamp(logit in -1e6f64..1e6) {
        let m = Calibrator::Gbdt(GbdtModel {
            n_features: 3,
            params: GbdtParams::default(),
            base_score: logit,
            trees: vec![],
            train_loss: vec![],
        });
        let p = calibrate_token(&m, 0.0, 0.0, 0.0);
        prop_assert!((1e-6..=1.0 - 1e-6).contains(&p));
    }

    #[test]
    fn mahalanobis_is_nonnegative(v in prop::collection::vec(-10.0f64..10.0, 3)) {
        let s = Mat::from_rows(&[vec![2.0, 0.5, 0.0], vec![0.5, 1.0, 0.1], vec![0.0, 0.1, 3.0]]);
        prop_assert!(mahalanobis(&v, &[0.0; 3], &s).unwrap() >= 0.0);
    }
}
