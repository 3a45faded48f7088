use super::*;
use crate::labels::Observation;
use proptest::prelude::*;
use rand::Rng;

/// Dual projected-gradient solve followed by an exact line search over the
/// bias. Returns the primal objective it reaches.
fn qp_oracle(x: &[Vec<f64>], y: &[f64], c: f64, w0: &[f64]) -> f64 {
    let n = x.len();
    let dim = w0.len();
    let k = |i: usize, j: usize| x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum::<f64>();
    let offs: Vec<f64> = (0..n)
        .map(|i| y[i] * x[i].iter().zip(w0).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let q: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| y[i] * y[j] * k(i, j)).collect()).collect();
    let lip: f64 = q.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(1e-12, f64::max);
    let project = |v: &[f64]| -> Vec<f64> {
        let at = |theta: f64| -> (Vec<f64>, f64) {
            let a: Vec<f64> = v.iter().zip(y).map(|(vi, yi)| (vi - theta * yi).clamp(0.0, c)).collect();
            let s = a.iter().zip(y).map(|(ai, yi)| ai * yi).sum();
            (a, s)
        };
        let (mut lo, mut hi) = (-1e6, 1e6);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if at(mid).1 > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        at(0.5 * (lo + hi)).0
    };
    let mut a = vec![0.0; n];
    let mut z = a.clone();
    let mut t = 1.0f64;
    for _ in 0..20_000 {
        let g: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| q[i][j] * z[j]).sum::<f64>() + offs[i] - 1.0)
            .collect();
        let step: Vec<f64> = (0..n).map(|i| z[i] - g[i] / lip).collect();
        let next = project(&step);
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        z = (0..n).map(|i| next[i] + (t - 1.0) / tn * (next[i] - a[i])).collect();
        a = next;
        t = tn;
    }
    let mut w = w0.to_vec();
    for i in 0..n {
        for d in 0..dim {
            w[d] += a[i] * y[i] * x[i][d];
        }
    }
    let primal = |b: f64| {
        let reg: f64 = w.iter().zip(w0).map(|(p, q)| (p - q) * (p - q)).sum();
        let hinge: f64 = (0..n)
            .map(|i| (1.0 - y[i] * (x[i].iter().zip(&w).map(|(u, v)| u * v).sum::<f64>() + b)).max(0.0))
            .sum();
        0.5 * reg + c * hinge
    };
    // convex piecewise-linear in b: the minimum sits at a breakpoint
    (0..n)
        .map(|i| y[i] - x[i].iter().zip(&w).map(|(u, v)| u * v).sum::<f64>())
        .map(primal)
        .fold(f64::INFINITY, f64::min)
}

fn random_instance(seed: u64, n: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = crate::rng::seeded(seed);
    loop {
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|r| if r[0] + 0.8 * rng.random_range(-1.0..1.0) > 0.0 { 1.0 } else { -1.0 })
            .collect();
        if has_both(&y) {
            return (x, y);
        }
    }
}

/// Min-norm subgradient of the primal, using the dual as multiplier guess.
fn stationarity(fit: &SvmFit, source: &[f64], x: &[Vec<f64>], y: &[f64]) -> f64 {
    let m = &fit.model;
    let c = m.c;
    let mut gw: Vec<f64> = m.weights.iter().zip(source).map(|(w, s)| w - s).collect();
    let mut gb = 0.0;
    for i in 0..x.len() {
        let marg = y[i] * m.decision(&x[i]);
        let coef = if marg < 1.0 - 1e-6 {
            c
        } else if marg > 1.0 + 1e-6 {
            0.0
        } else {
            fit.dual[i].clamp(0.0, c)
        };
        for d in 0..gw.len() {
            gw[d] -= coef * y[i] * x[i][d];
        }
        gb -= coef * y[i];
    }
    (gw.iter().map(|v| v * v).sum::<f64>() + gb * gb).sqrt()
}

#[test]
fn svm_matches_qp_oracle() {
    for seed in 0..20u64 {
        let n = 10 + (seed as usize * 7) % 41;
        let (x, y) = random_instance(seed, n, 2 + seed as usize % 3);
        let c = DEFAULT_C_GRID[seed as usize % 5];
        let m = train_svm(&x, &y, c).unwrap();
        let ours = svm_objective(&m, None, &x, &y);
        let oracle = qp_oracle(&x, &y, c, &vec![0.0; x[0].len()]);
        assert!(
            (ours - oracle).abs() <= 1e-3 * oracle.abs().max(1e-12),
            "seed {seed}: {ours} vs {oracle}"
        );
    }
}

#[test]
fn adapted_svm_matches_qp_oracle_with_conflicting_source() {
    for seed in 0..20u64 {
        let (x, y) = random_instance(100 + seed, 12 + seed as usize * 2, 2);
        let src = LinearModel {
            weights: vec![-1.5, 0.7],
            bias: 0.3,
            c: 1.0,
            source: ModelSource::Consensus,
        };
        let c = [0.1, 1.0, 10.0][seed as usize % 3];
        let m = train_adapted_svm(&x, &y, &src, c).unwrap();
        let ours = svm_objective(&m, Some(&src), &x, &y);
        let oracle = qp_oracle(&x, &y, c, &src.weights);
        assert!(
            (ours - oracle).abs() <= 1e-3 * oracle.abs().max(1e-12),
            "seed {seed}: {ours} vs {oracle}"
        );
    }
}

#[test]
fn contradictory_duplicates() {
    let x = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![-1.0, 0.0], vec![-1.0, 0.0], vec![2.0, 0.5]];
    let y = vec![1.0, -1.0, 1.0, -1.0, 1.0];
    let m = train_svm(&x, &y, 1.0).unwrap();
    let ours = svm_objective(&m, None, &x, &y);
    let oracle = qp_oracle(&x, &y, 1.0, &[0.0, 0.0]);
    assert!((ours - oracle).abs() <= 1e-3 * oracle);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_source_reduces_to_standard(seed in any::<u64>(), n in 6usize..40, c_idx in 0usize..5) {
        let (x, y) = random_instance(seed, n, 3);
        let c = DEFAULT_C_GRID[c_idx];
        let plain = train_svm(&x, &y, c).unwrap();
        let adapted = train_adapted_svm(&x, &y, &LinearModel::zero(3, ModelSource::Consensus), c).unwrap();
        let dist: f64 = plain.weights.iter().zip(&adapted.weights).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        prop_assert!(dist <= 1e-4);
    }

    #[test]
    fn solution_is_stationary(seed in any::<u64>(), n in 6usize..40, c_idx in 0usize..5) {
        let (x, y) = random_instance(seed, n, 2);
        let c = DEFAULT_C_GRID[c_idx];
        let fit = train_svm_detailed(&x, &y, c, None).unwrap();
        prop_assert!(stationarity(&fit, &[0.0, 0.0], &x, &y) <= 1e-3);
    }

    #[test]
    fn standardization_is_consistent(seed in any::<u64>(), shift in -50.0f64..50.0, scale in 0.1f64..20.0) {
        // training on affinely transformed raw features gives the same predictions
        let (x, y) = random_instance(seed, 30, 2);
        let moved: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| v * scale + shift).collect()).collect();
        let s1 = Standardizer::fit(x.iter().map(Vec::as_slice), 2);
        let s2 = Standardizer::fit(moved.iter().map(Vec::as_slice), 2);
        let z1: Vec<Vec<f64>> = x.iter().map(|r| s1.apply(r)).collect();
        let z2: Vec<Vec<f64>> = moved.iter().map(|r| s2.apply(r)).collect();
        let m1 = train_svm(&z1, &y, 1.0).unwrap();
        let m2 = train_svm(&z2, &y, 1.0).unwrap();
        for (a, b) in z1.iter().zip(&z2) {
            let (d1, d2) = (m1.decision(a), m2.decision(b));
            if d1.abs() > 1e-6 {
                prop_assert_eq!(d1 > 0.0, d2 > 0.0);
            }
        }
    }
}

/// Items on a 2-D grid of cues; school 0 keys on dim 0, school 1 on dim 1.
fn two_school_world(seed: u64) -> (LabelMatrix, FeatureTable, ShadeAssignment) {
    let mut rng = crate::rng::seeded(seed);
    let n_items = 80;
    let cues: Vec<Vec<f64>> = (0..n_items)
        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let mut triples = Vec::new();
    for a in 0..20 {
        let school = a / 10;
        for (j, c) in cues.iter().enumerate() {
            if rng.random::<f64>() < 0.5 {
                triples.push((a, j, u8::from(c[school] > 0.0)));
            }
        }
    }
    let matrix = LabelMatrix::from_triples(20, n_items, triples).unwrap();
    let ids = (0..n_items).map(|j| format!("x{j}")).collect();
    let features = FeatureTable::new(ids, cues).unwrap();
    let assignment = ShadeAssignment {
        k: 2,
        assignment: (0..20).map(|a| Some(a / 10)).collect(),
        centroids: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        silhouette: None,
        curve: Vec::new(),
        pruned: Vec::new(),
        min_size: 1,
        within_ssd: 0.0,
    };
    (matrix, features, assignment)
}

#[test]
fn shade_models_recover_schools() {
    let (matrix, features, assignment) = two_school_world(7);
    let set = build_shade_classifiers(&matrix, &features, &assignment, &TrainOptions::default()).unwrap();
    assert!(set.fallback.is_empty());
    let mut rng = crate::rng::seeded(99);
    for school in 0..2 {
        let user = UserRef::Known(format!("a{}", school * 10));
        let mut ok = 0;
        for _ in 0..500 {
            let raw = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let p = predict_for_user(&set, &user, &raw);
            assert_eq!(p.shade, Some(school));
            ok += usize::from(p.label == u8::from(raw[school] > 0.0));
        }
        assert!(ok as f64 / 500.0 >= 0.9, "school {school}: {ok}/500");
    }
}

#[test]
fn dispatch_and_fallback() {
    let (matrix, features, assignment) = two_school_world(8);
    let set = build_shade_classifiers(&matrix, &features, &assignment, &TrainOptions::default()).unwrap();
    let raw = [0.3, -0.4, 0.1];
    let p = predict_for_user(&set, &UserRef::Known("a15".into()), &raw);
    assert_eq!(p.margin, set.shades[&1].decision(&set.transform(&raw)));
    assert!(!p.fallback);
    let q = predict_for_user(&set, &UserRef::Known("stranger".into()), &raw);
    assert!(q.fallback);
    assert_eq!(q.margin, set.consensus.decision(&set.transform(&raw)));
    let r = predict_for_user(&set, &UserRef::Factor(vec![0.1, 0.9]), &raw);
    assert_eq!(r.shade, Some(1));
}

#[test]
fn single_shade_collapses_to_consensus() {
    let (matrix, features, mut assignment) = two_school_world(9);
    // everyone in one shade; labels from school 0 only
    let entries: Vec<Observation> = matrix.entries().iter().copied().filter(|e| e.annotator < 10).collect();
    let matrix = matrix.with_entries(entries).unwrap();
    assignment.k = 1;
    assignment.assignment = vec![Some(0); 20];
    assignment.centroids = vec![vec![0.0, 0.0]];
    let set = build_shade_classifiers(&matrix, &features, &assignment, &TrainOptions::default()).unwrap();
    let mut rng = crate::rng::seeded(5);
    let mut agree = 0;
    for _ in 0..1000 {
        let raw = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let a = predict_for_user(&set, &UserRef::Known("a0".into()), &raw).label;
        agree += usize::from(a == set.predict_consensus(&raw).label);
    }
    assert!(agree >= 990, "{agree}/1000");
}

#[test]
fn shade_without_both_classes_falls_back() {
    let (matrix, features, assignment) = two_school_world(10);
    // school 1 keeps only its positive labels
    let entries: Vec<Observation> = matrix
        .entries()
        .iter()
        .copied()
        .filter(|e| e.annotator < 10 || e.label == 1)
        .collect();
    let matrix = matrix.with_entries(entries).unwrap();
    let set = build_shade_classifiers(&matrix, &features, &assignment, &TrainOptions::default()).unwrap();
    assert_eq!(set.fallback, vec![1]);
    assert_eq!(set.shades[&1].weights, set.consensus.weights);
}

#[test]
fn classifier_file_roundtrip() {
    let (matrix, features, assignment) = two_school_world(11);
    let set = build_shade_classifiers(&matrix, &features, &assignment, &TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    set.save(&path).unwrap();
    assert_eq!(ShadeClassifierSet::load(&path).unwrap(), set);
}

#[test]
fn random_predictor_hits_chance() {
    for q in 2..=5usize {
        let mut p = UniformRandomPredictor::new(q as u64);
        let targets: Vec<(String, u8)> = (0..q).map(|k| (format!("attr{k}"), (k % 2) as u8)).collect();
        let hits = (0..10_000)
            .filter(|_| multi_attribute_query(&mut p, &UserRef::Known("u".into()), &[0.0], &targets).unwrap())
            .count();
        let rate = hits as f64 / 10_000.0;
        assert!((rate - 0.5f64.powi(q as i32)).abs() <= 0.02, "q={q}: {rate}");
    }
}

#[test]
fn query_reduces_to_single_prediction_and_checks_attributes() {
    let (matrix, features, assignment) = two_school_world(12);
    let set = build_shade_classifiers(&matrix, &features, &assignment, &TrainOptions::default()).unwrap();
    let mut sets = BTreeMap::new();
    sets.insert("attr".to_string(), set.clone());
    let user = UserRef::Known("a3".into());
    let raw = [0.5, -0.2, 0.0];
    let label = predict_for_user(&set, &user, &raw).label;
    assert!(multi_attribute_query(&mut sets, &user, &raw, &[("attr".into(), label)]).unwrap());
    assert!(!multi_attribute_query(&mut sets, &user, &raw, &[("attr".into(), 1 - label)]).unwrap());
    assert!(matches!(
        multi_attribute_query(&mut sets, &user, &raw, &[("other".into(), 1)]),
        Err(Error::MissingAttribute(_))
    ));
}

#[test]
fn shade_importance_finds_school_cues() {
    let (matrix, features, assignment) = two_school_world(13);
    let groups = vec![vec![0], vec![1], vec![2]];
    let reports = shade_importance(&matrix, &features, &assignment, 0.9, 0.02, &groups).unwrap();
    assert_eq!(reports.len(), 2);
    for (k, r) in &reports {
        let g = &r.group_magnitudes;
        assert!(g[2] < g[0].max(g[1]), "shade {k}: {g:?}");
    }
}

#[test]
fn select_c_prefers_smaller_on_ties() {
    // perfectly separable: every C classifies every fold correctly
    let x: Vec<Vec<f64>> = (0..12).map(|i| vec![if i % 2 == 0 { 5.0 } else { -5.0 }]).collect();
    let y: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    assert_eq!(select_c(&x, &y, &DEFAULT_C_GRID, 3, None, 1).unwrap(), 0.01);
}
