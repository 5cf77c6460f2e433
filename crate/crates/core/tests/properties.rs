use std::cell::RefCell;

use approx::assert_abs_diff_eq;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

use mtcrec::corpus::{Membership, PlaylistId, SongId, UserId};
use mtcrec::losses::{
    bottom_push_risk, mtc_risk_grad, rank_risk_lse, rank_risk_surrogate, regulariser, Hyperparams,
    ModelParams, PlaylistTask, Problem,
};
use mtcrec::metrics::{auc, hit_rate_at_k, spread};
use mtcrec::model::{fit, ranking};
use mtcrec::owlqn::{minimize, pseudo_gradient, OwlqnConfig, Termination};
use mtcrec::Result;

fn labelled(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2..max_len)
        .prop_flat_map(|m| {
            (
                prop::collection::vec(-3i32..4, m),
                prop::collection::vec(any::<bool>(), m),
            )
        })
        .prop_filter("needs both labels", |(_, l)| {
            l.iter().any(|&b| b) && l.iter().any(|&b| !b)
        })
        .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 * 0.5).collect(), l))
}

fn membership(labels: &[bool]) -> Membership {
    let pos = (0..labels.len())
        .filter(|&j| labels[j])
        .map(SongId)
        .collect();
    Membership::new(pos, labels.len()).unwrap()
}

/// One-playlist problem whose song features are the identity, so the
/// weight vector is the score vector.
fn identity_problem(labels: &[bool]) -> Problem<f64> {
    let m = labels.len();
    let task = PlaylistTask {
        user: UserId(0),
        playlist: PlaylistId(0),
        positives: (0..m).filter(|&j| labels[j]).collect(),
    };
    Problem::new(Array2::eye(m), vec![task], 1, 1).unwrap()
}

fn scores_as_theta(scores: &[f64]) -> ModelParams<f64> {
    let m = scores.len();
    let mut theta = ModelParams::zeros(1, 1, m);
    theta.mu_mut().assign(&Array1::from(scores.to_vec()));
    theta
}

proptest! {
    #[test]
    fn auc_invariant_under_increasing_transform((scores, labels) in labelled(40)) {
        let a = auc(&scores, &labels).unwrap();
        let t: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + s * s * s).collect();
        prop_assert_eq!(a, auc(&t, &labels).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auc_complements_under_negation((scores, labels) in labelled(40)) {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        assert_abs_diff_eq!(auc(&scores, &labels).unwrap() + auc(&neg, &labels).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bottom_push_matches_pair_loop((scores, labels) in labelled(40)) {
        let got = bottom_push_risk(&scores, &membership(&labels)).unwrap();
        let lowest = scores.iter().zip(&labels).filter(|(_, &l)| l).map(|(&s, _)| s).fold(f64::INFINITY, f64::min);
        let negs: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
        let want = negs.iter().filter(|&&s| s >= lowest).count() as f64 / negs.len() as f64;
        prop_assert_eq!(got, want);
    }

    #[test]
    fn surrogate_bounds_risk_and_soft_min_decreases((scores, labels) in labelled(25)) {
        let problem = identity_problem(&labels);
        let theta = scores_as_theta(&scores);
        let risk = bottom_push_risk(&scores, &membership(&labels)).unwrap();
        let surrogate = rank_risk_surrogate(&theta, &problem).unwrap().total;
        prop_assert!(risk <= surrogate);
        let mut prev = f64::INFINITY;
        for p in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let v = rank_risk_lse(&theta, &problem, p).unwrap().total;
            prop_assert!(v <= prev);
            prop_assert!(v >= surrogate * (1.0 - 1e-12));
            prev = v;
        }
    }

    #[test]
    fn hit_rate_monotone_in_k(scores in prop::collection::vec(-5.0f64..5.0, 5..40), seed in 0usize..1000) {
        let order = ranking(Array1::from(scores.clone()).view());
        let m = scores.len();
        let mut truth: Vec<usize> = (0..m).filter(|j| (j * 7 + seed) % 3 == 0).collect();
        truth.dedup();
        prop_assume!(!truth.is_empty());
        let mut prev = 0.0;
        for k in 1..=m {
            let h = hit_rate_at_k(&order, &truth, k).unwrap();
            prop_assert!(h >= prev);
            prev = h;
        }
        prop_assert_eq!(prev, 1.0);
    }

    #[test]
    fn spread_is_permutation_invariant(scores in prop::collection::vec(-10.0f64..10.0, 1..50), shift in 0usize..50) {
        let mut rotated = scores.clone();
        let k = shift % rotated.len();
        rotated.rotate_left(k);
        let a = spread(&scores).unwrap();
        assert_abs_diff_eq!(a, spread(&rotated).unwrap(), epsilon = 1e-12);
        prop_assert!(a >= 0.0 && a <= (scores.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn owlqn_iterates_never_cross_zero_on_l1_coordinates(
        a in prop::collection::vec(0.5f64..4.0, 6),
        b in prop::collection::vec(-2.0f64..2.0, 6),
        c in prop::collection::vec(0.0f64..1.5, 6),
        x0 in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let (a, b, c) = (Array1::from(a), Array1::from(b), Array1::from(c));
        // coupled quadratic so that quasi-Newton directions are not axis aligned
        let visited = RefCell::new(Vec::new());
        let objective = |x: &Array1<f64>| -> Result<(f64, Array1<f64>)> {
            visited.borrow_mut().push(x.clone());
            let r = x - &b;
            let coupling: f64 = r.windows(2).into_iter().map(|w| w[0] * w[1]).sum();
            let mut g = &a * &r;
            for j in 0..r.len() {
                if j > 0 { g[j] += 0.25 * r[j - 1]; }
                if j + 1 < r.len() { g[j] += 0.25 * r[j + 1]; }
            }
            Ok((0.5 * (&a * &r * &r).sum() + 0.25 * coupling, g))
        };
        let report = minimize(objective, &c, Array1::from(x0), &OwlqnConfig::default()).unwrap();
        prop_assert!(report.trace.windows(2).all(|w| w[1] <= w[0]));
        let points = visited.into_inner();
        // a trial point may only sit in the orthant of the point it was drawn from
        for pair in points.windows(2) {
            for j in 0..c.len() {
                if c[j] > 0.0 {
                    prop_assert!(pair[0][j] * pair[1][j] >= 0.0 || pair[0][j] == 0.0);
                }
            }
        }
    }
}

/// Plain L-BFGS with the same initial step, direction, history rule and
/// backtracking line search, written independently of the library.
fn reference_lbfgs(
    f: impl Fn(&Array1<f64>) -> (f64, Array1<f64>),
    x0: Array1<f64>,
    iters: usize,
) -> Array1<f64> {
    let cfg = OwlqnConfig::default();
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut ss: Vec<Array1<f64>> = Vec::new();
    let mut ys: Vec<Array1<f64>> = Vec::new();
    for _ in 0..iters {
        let gn = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gn <= cfg.grad_tol * x.iter().fold(1.0f64, |m, v| m.max(v.abs())) {
            break;
        }
        let mut q = g.clone();
        let mut alpha = vec![0.0; ss.len()];
        for i in (0..ss.len()).rev() {
            alpha[i] = (1.0 / ss[i].dot(&ys[i])) * ss[i].dot(&q);
            q = &q - &(&ys[i] * alpha[i]);
        }
        if let (Some(s), Some(y)) = (ss.last(), ys.last()) {
            q *= s.dot(y) / y.dot(y);
        }
        for i in 0..ss.len() {
            let beta = (1.0 / ss[i].dot(&ys[i])) * ys[i].dot(&q);
            q = &q + &(&ss[i] * (alpha[i] - beta));
        }
        let mut d = -q;
        if d.dot(&g) >= 0.0 {
            ss.clear();
            ys.clear();
            d = -g.clone();
        }
        let mut step = if ss.is_empty() {
            1.0f64.min(1.0 / g.dot(&g).sqrt())
        } else {
            1.0
        };
        let mut next = None;
        for _ in 0..cfg.max_line_search {
            let trial = &x + &(&d * step);
            let (ft, gt) = f(&trial);
            if ft <= fx + cfg.armijo * g.dot(&(&trial - &x)) {
                next = Some((trial, ft, gt));
                break;
            }
            step *= cfg.shrink;
        }
        let Some((xn, fnew, gnew)) = next else { break };
        let s = &xn - &x;
        let y = &gnew - &g;
        if s.dot(&y) > f64::EPSILON * y.dot(&y) && s.dot(&y) > 0.0 {
            if ss.len() == cfg.memory {
                ss.remove(0);
                ys.remove(0);
            }
            ss.push(s);
            ys.push(y);
        }
        x = xn;
        fx = fnew;
        g = gnew;
    }
    x
}

#[test]
fn owlqn_without_l1_matches_reference_lbfgs() {
    let f = |x: &Array1<f64>| {
        let (a, b) = (x[0], x[1]);
        let mut value = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let mut g = Array1::zeros(x.len());
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        for j in 2..x.len() {
            let w = j as f64;
            value += w * (x[j] - 0.5).powi(2);
            g[j] = 2.0 * w * (x[j] - 0.5);
        }
        (value, g)
    };
    let x0 = Array1::from(vec![-1.2, 1.0, 3.0, -2.0, 0.0]);
    let iters = 40;
    let cfg = OwlqnConfig {
        max_iters: iters,
        ..OwlqnConfig::default()
    };
    let report = minimize(|x| Ok(f(x)), &Array1::zeros(5), x0.clone(), &cfg).unwrap();
    let reference = reference_lbfgs(f, x0, report.iterations);
    for j in 0..5 {
        assert_abs_diff_eq!(report.x[j], reference[j], epsilon = 1e-12);
    }
}

#[test]
fn diagonal_lasso_matches_soft_threshold() {
    let dim = 50;
    let a = Array1::from_shape_fn(dim, |j| 0.5 + (j % 7) as f64);
    let b = Array1::from_shape_fn(dim, |j| ((j * 37 % 19) as f64 - 9.0) / 4.0);
    let c = Array1::from_shape_fn(dim, |j| (j % 4) as f64 * 0.6);
    let cfg = OwlqnConfig {
        grad_tol: 1e-10,
        ..OwlqnConfig::default()
    };
    let report = minimize(
        |x| {
            let r = x - &b;
            Ok((0.5 * (&a * &r * &r).sum(), &a * &r))
        },
        &c,
        Array1::zeros(dim),
        &cfg,
    )
    .unwrap();
    assert_eq!(report.termination, Termination::Converged);
    for j in 0..dim {
        let want = b[j].signum() * (b[j].abs() - c[j] / a[j]).max(0.0);
        assert_abs_diff_eq!(report.x[j], want, epsilon = 1e-6);
        if c[j] > (a[j] * b[j]).abs() {
            assert_eq!(report.x[j], 0.0);
        }
    }
    let pg = pseudo_gradient(&report.x, &(&a * &(&report.x - &b)), &c);
    assert!(pg.iter().all(|v| v.abs() < 1e-8));
}

/// With no regularisation and one playlist per user, the combined weights
/// of the multitask model are those of independent per-playlist fits.
#[test]
fn unregularised_model_matches_single_vector_fits() {
    let x = Array2::from_shape_fn((8, 3), |(m, j)| {
        if j == 2 {
            1.0
        } else {
            ((m * 5 + j * 3) % 7) as f64 / 3.0 - 1.0
        }
    });
    // duplicated rows with split labels keep each minimiser finite
    let x = ndarray::concatenate![ndarray::Axis(0), x, x];
    let playlists: [&[usize]; 2] = [&[0, 1, 2, 11, 12, 13, 14, 15], &[0, 3, 5, 8, 9, 10, 12, 14]];
    let tasks: Vec<PlaylistTask> = playlists
        .iter()
        .enumerate()
        .map(|(i, pos)| PlaylistTask {
            user: UserId(i),
            playlist: PlaylistId(i),
            positives: pos.to_vec(),
        })
        .collect();
    let hp = Hyperparams::unregularised(2.0);
    let cfg = OwlqnConfig {
        grad_tol: 1e-10,
        max_iters: 2000,
        ..OwlqnConfig::default()
    };
    let problem = Problem::new(x.clone(), tasks.clone(), 2, 2).unwrap();
    let (theta, _) = fit(&problem, &hp, &cfg).unwrap();
    for (i, task) in tasks.iter().enumerate() {
        let single = Problem::new(
            x.clone(),
            vec![PlaylistTask {
                user: UserId(0),
                playlist: PlaylistId(0),
                positives: task.positives.clone(),
            }],
            1,
            1,
        )
        .unwrap();
        let (w, _) = fit(&single, &hp, &cfg).unwrap();
        let w = w.combined(UserId(0), PlaylistId(0)).unwrap();
        let combined = theta.combined(UserId(i), PlaylistId(i)).unwrap();
        let scores_multi = x.dot(&combined);
        let scores_single = x.dot(&w);
        for m in 0..x.nrows() {
            assert_abs_diff_eq!(scores_multi[m], scores_single[m], epsilon = 1e-6);
        }
    }
}

#[test]
fn f32_and_f64_gradients_agree() {
    let x64 = Array2::from_shape_fn((6, 3), |(m, j)| ((m + 2 * j) % 5) as f64 * 0.3 - 0.5);
    let tasks = vec![
        PlaylistTask {
            user: UserId(0),
            playlist: PlaylistId(0),
            positives: vec![0, 2],
        },
        PlaylistTask {
            user: UserId(0),
            playlist: PlaylistId(1),
            positives: vec![1, 4, 5],
        },
    ];
    let p64 = Problem::new(x64.clone(), tasks.clone(), 1, 2).unwrap();
    let p32 = Problem::new(x64.mapv(|v| v as f32), tasks, 1, 2).unwrap();
    let flat: Vec<f64> = (0..12).map(|k| (k as f64 * 0.37).sin() * 0.4).collect();
    let t64 = ModelParams::from_flat(1, 2, 3, Array1::from(flat.clone())).unwrap();
    let t32 = ModelParams::from_flat(1, 2, 3, Array1::from(flat).mapv(|v| v as f32)).unwrap();
    let (r64, g64) = mtc_risk_grad(&t64, &p64, 1.5).unwrap();
    let (r32, g32) = mtc_risk_grad(&t32, &p32, 1.5f32).unwrap();
    assert_abs_diff_eq!(r64.total, r32.total as f64, epsilon = 1e-5);
    for (a, b) in g64.flat().iter().zip(g32.flat()) {
        assert_abs_diff_eq!(*a, *b as f64, epsilon = 1e-5);
    }
    let hp = Hyperparams::default();
    let reg = regulariser(&t32, &hp).unwrap();
    assert_eq!(reg.l1_weights.len(), 12);
}
