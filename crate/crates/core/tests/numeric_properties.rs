use faststi_core::data::{split_and_window, Normalizer, SplitRatios};
use faststi_core::graph::{diff_gcn, DiffGcnParams, Features};
use faststi_core::grid::{Grid, Mask};
use faststi_core::metrics::{crps_point, empirical_quantile, mae, rmse};
use faststi_core::schedule::{AlignedSchedule, ScheduleKind, TrainingSchedule};
use faststi_core::RoadGraph;
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = ScheduleKind> {
    prop_oneof![Just(ScheduleKind::Linear), Just(ScheduleKind::Quadratic), Just(ScheduleKind::Cosine)]
}

/// Non-negative adjacency with zero diagonal.
fn adjacency(max_n: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (2..=max_n).prop_flat_map(|n| {
        proptest::collection::vec(prop_oneof![Just(0.0), 0.1f64..2.0], n * n).prop_map(move |mut a| {
            for i in 0..n {
                a[i * n + i] = 0.0;
            }
            (n, a)
        })
    })
}

fn random_params(k: usize, rho: f64, cin: usize, cout: usize, seed: &[f64]) -> DiffGcnParams {
    let mut p = DiffGcnParams::zeros(k, rho, cin, cout);
    let mut i = 0;
    let mut next = || {
        i += 1;
        seed[i % seed.len()] * ((i * 7919) % 13) as f64 / 13.0 - 0.3
    };
    for m in p.forward.iter_mut().chain(p.reverse.iter_mut()) {
        for v in m.iter_mut() {
            *v = next();
        }
    }
    p
}

fn dense_walks(n: usize, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; n * n];
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        let out: f64 = (0..n).map(|j| a[i * n + j]).sum();
        let inn: f64 = (0..n).map(|j| a[j * n + i]).sum();
        for j in 0..n {
            if out > 0.0 {
                p[i * n + j] = a[i * n + j] / out;
            }
            if inn > 0.0 {
                q[i * n + j] = a[j * n + i] / inn;
            }
        }
    }
    (p, q)
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                c[i * n + j] += a[i * n + k] * b[k * n + j];
            }
        }
    }
    c
}

/// Σ_k s_k (Pᵏ X Θ¹_k + Qᵏ X Θ²_k) with explicit matrix powers.
fn dense_oracle(feat: &Features, n: usize, a: &[f64], p: &DiffGcnParams) -> Vec<f64> {
    let (pw, qw) = dense_walks(n, a);
    let mut identity = vec![0.0; n * n];
    for i in 0..n {
        identity[i * n + i] = 1.0;
    }
    let (mut pk, mut qk) = (identity.clone(), identity);
    let mut out = vec![0.0; feat.len * n * p.c_out];
    for k in 0..=p.k_steps {
        if k > 0 {
            pk = matmul(&pk, &pw, n);
            qk = matmul(&qk, &qw, n);
        }
        let s = if k == 0 { 1.0 } else { p.rho };
        for l in 0..feat.len {
            for i in 0..n {
                for o in 0..p.c_out {
                    let mut acc = 0.0;
                    for j in 0..n {
                        for c in 0..p.c_in {
                            let x = feat.at(l, j, c);
                            acc += pk[i * n + j] * x * p.forward[k][c * p.c_out + o];
                            acc += qk[i * n + j] * x * p.reverse[k][c * p.c_out + o];
                        }
                    }
                    out[(l * n + i) * p.c_out + o] += s * acc;
                }
            }
        }
    }
    out
}

fn features(len: usize, n: usize, c: usize, vals: &[f64]) -> Features {
    let data = (0..len * n * c).map(|i| vals[i % vals.len()] + 0.01 * i as f64).collect();
    Features::new(len, n, c, data).unwrap()
}

proptest! {
    #[test]
    fn schedule_round_trip_and_monotone(kind in kind(), b1 in 1e-5f64..0.05, span in 0.0f64..0.5, t in 2usize..80) {
        let b_end = (b1 + span).min(0.9);
        let s = TrainingSchedule::new(kind, b1, b_end.max(b1), t).unwrap();
        let again = TrainingSchedule::from_betas(s.betas().to_vec()).unwrap();
        prop_assert_eq!(again.alphas(), s.alphas());
        prop_assert_eq!(again.alpha_bars(), s.alpha_bars());
        for i in 1..t {
            let want = s.alpha_bars()[i - 1] * (1.0 - s.betas()[i]);
            prop_assert!((s.alpha_bars()[i] - want).abs() <= 1e-12 * want);
            prop_assert!(s.alpha_bars()[i] < s.alpha_bars()[i - 1]);
        }
        prop_assert!(s.alpha_bars().iter().all(|a| *a > 0.0 && *a < 1.0));
        if kind != ScheduleKind::Cosine {
            prop_assert_eq!(s.betas()[0], b1);
            prop_assert_eq!(s.betas()[t - 1], b_end.max(b1));
            prop_assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn alignment_brackets_each_level(xis in proptest::collection::vec(0.001f64..0.3, 1..10)) {
        let training = TrainingSchedule::new(ScheduleKind::Quadratic, 1e-4, 0.2, 50).unwrap();
        let Ok(a) = AlignedSchedule::new(&xis, &training) else { return Ok(()); };
        let roots: Vec<f64> = training.alpha_bars().iter().map(|v| v.sqrt()).collect();
        for (c, &t) in a.t_aligned().iter().enumerate() {
            prop_assert!((0.0..=49.0).contains(&t));
            let r = a.phi_bars()[c].sqrt();
            prop_assert!(roots[t.ceil() as usize] <= r + 1e-15);
            prop_assert!(r <= roots[t.floor() as usize] + 1e-15);
        }
        prop_assert!(a.t_aligned().windows(2).all(|w| w[1] > w[0]));
        for c in 1..a.steps() {
            let want = (1.0 - a.phi_bars()[c - 1]) / (1.0 - a.phi_bars()[c]) * a.xis()[c];
            prop_assert!((a.xi_tildes()[c] - want).abs() <= 1e-15 * want.max(1.0));
        }
    }

    #[test]
    fn alignment_identity_on_training_levels(k in 1usize..40) {
        let training = TrainingSchedule::new(ScheduleKind::Quadratic, 1e-4, 0.2, 50).unwrap();
        let a = AlignedSchedule::new(&training.betas()[..k], &training).unwrap();
        for (c, t) in a.t_aligned().iter().enumerate() {
            prop_assert!((t - c as f64).abs() < 1e-9, "t[{}] = {}", c, t);
        }
    }

    #[test]
    fn walks_are_row_stochastic((n, a) in adjacency(7)) {
        let g = RoadGraph::from_adjacency(a.clone(), n).unwrap();
        for (walk, deg_of) in [(g.forward(), 0), (g.reverse(), 1)] {
            for i in 0..n {
                let deg: f64 = (0..n).map(|j| if deg_of == 0 { a[i * n + j] } else { a[j * n + i] }).sum();
                let sum: f64 = walk.row(i).map(|(_, w)| w).sum();
                if deg > 0.0 {
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                } else {
                    prop_assert_eq!(sum, 0.0);
                }
            }
        }
    }

    #[test]
    fn diff_gcn_matches_dense_oracle((n, a) in adjacency(6), k in 0usize..=3, rho in 0.0f64..=1.0,
                                      vals in proptest::collection::vec(-2.0f64..2.0, 8)) {
        let g = RoadGraph::from_adjacency(a.clone(), n).unwrap();
        let feat = features(3, n, 2, &vals);
        let p = random_params(k, rho, 2, 3, &vals);
        let got = diff_gcn(&feat, &g, &p).unwrap();
        let want = dense_oracle(&feat, n, &a, &p);
        let scale = want.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        for (x, y) in got.data.iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn diff_gcn_is_linear((n, a) in adjacency(6), vals in proptest::collection::vec(-2.0f64..2.0, 8),
                          other in proptest::collection::vec(-2.0f64..2.0, 5), c in -3.0f64..3.0) {
        let g = RoadGraph::from_adjacency(a, n).unwrap();
        let p = random_params(2, 0.4, 2, 2, &vals);
        let x = features(2, n, 2, &vals);
        let y = features(2, n, 2, &other);
        let combo = Features::new(2, n, 2, x.data.iter().zip(&y.data).map(|(u, v)| u + c * v).collect()).unwrap();
        let fx = diff_gcn(&x, &g, &p).unwrap();
        let fy = diff_gcn(&y, &g, &p).unwrap();
        let fc = diff_gcn(&combo, &g, &p).unwrap();
        for i in 0..fc.data.len() {
            let want = fx.data[i] + c * fy.data[i];
            prop_assert!((fc.data[i] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn diff_gcn_hop_locality((n, a) in adjacency(6), j in 0usize..6, vals in proptest::collection::vec(-2.0f64..2.0, 8)) {
        let j = j % n;
        let g = RoadGraph::from_adjacency(a, n).unwrap();
        let p = random_params(1, 0.5, 2, 2, &vals);
        let x = features(1, n, 2, &vals);
        let mut bumped = x.clone();
        bumped.data[j * 2] += 1.0;
        bumped.data[j * 2 + 1] -= 0.5;
        let fx = diff_gcn(&x, &g, &p).unwrap();
        let fb = diff_gcn(&bumped, &g, &p).unwrap();
        let near = g.neighbours(j);
        for i in 0..n {
            let changed = (0..2).any(|c| fx.at(0, i, c) != fb.at(0, i, c));
            if changed {
                prop_assert!(i == j || near.contains(&i), "node {} changed", i);
            }
        }
    }

    #[test]
    fn diff_gcn_permutation_equivariant((n, a) in adjacency(6), vals in proptest::collection::vec(-2.0f64..2.0, 8), shift in 1usize..5) {
        let g = RoadGraph::from_adjacency(a, n).unwrap();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let gp = g.permuted(&perm).unwrap();
        let p = random_params(2, 0.3, 2, 2, &vals);
        let x = features(2, n, 2, &vals);
        let mut xp = x.clone();
        for l in 0..2 {
            for i in 0..n {
                for c in 0..2 {
                    xp.data[(l * n + i) * 2 + c] = x.at(l, perm[i], c);
                }
            }
        }
        let fx = diff_gcn(&x, &g, &p).unwrap();
        let fp = diff_gcn(&xp, &gp, &p).unwrap();
        for l in 0..2 {
            for i in 0..n {
                for c in 0..2 {
                    prop_assert!((fp.at(l, i, c) - fx.at(l, perm[i], c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn crps_translation_and_scale(samples in proptest::collection::vec(-5.0f64..5.0, 2..60), truth in -5.0f64..5.0,
                                  shift in -10.0f64..10.0, scale in 0.1f64..10.0) {
        let base = crps_point(&samples, truth).unwrap();
        let shifted: Vec<f64> = samples.iter().map(|s| s + shift).collect();
        prop_assert!((crps_point(&shifted, truth + shift).unwrap() - base).abs() < 1e-12 * (1.0 + shift.abs()) * 10.0);
        let scaled: Vec<f64> = samples.iter().map(|s| s * scale).collect();
        prop_assert!((crps_point(&scaled, truth * scale).unwrap() - scale * base).abs() < 1e-10 * (1.0 + scale * base));
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn quantiles_non_decreasing(samples in proptest::collection::vec(-5.0f64..5.0, 1..60)) {
        let mut s = samples.clone();
        s.sort_by(|a, b| a.total_cmp(b));
        let qs: Vec<f64> = (1..=19).map(|i| empirical_quantile(&s, i as f64 * 0.05)).collect();
        prop_assert!(qs.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn mae_not_above_rmse(pairs in proptest::collection::vec((-9.0f64..9.0, -9.0f64..9.0, any::<bool>()), 1..50)) {
        let n = pairs.len();
        let truth = Grid::from_vec(n, 1, pairs.iter().map(|p| p.0).collect()).unwrap();
        let imp = Grid::from_vec(n, 1, pairs.iter().map(|p| p.1).collect()).unwrap();
        let mut bits: Vec<bool> = pairs.iter().map(|p| p.2).collect();
        bits[0] = true;
        let mask = Mask::from_vec(n, 1, bits).unwrap();
        prop_assert!(mae(&truth, &imp, &mask).unwrap() <= rmse(&truth, &imp, &mask).unwrap() * (1.0 + 1e-12));
    }

    #[test]
    fn windows_stay_inside_splits(total in 10usize..400, len in 1usize..30, stride in 1usize..5) {
        prop_assume!(len * 10 <= total);
        let sets = split_and_window(total, len, SplitRatios::default(), stride).unwrap();
        for set in &sets {
            for w in set.windows() {
                prop_assert!(w.start >= set.range.start && w.end <= set.range.end);
            }
        }
        prop_assert_eq!(sets[0].range.end, sets[1].range.start);
        prop_assert_eq!(sets[1].range.end, sets[2].range.start);
        prop_assert_eq!(sets[2].range.end, total);
        for set in &sets[1..] {
            prop_assert!(set.starts.windows(2).all(|w| w[1] - w[0] >= len));
        }
    }

    #[test]
    fn normalizer_round_trip_and_no_leakage(vals in proptest::collection::vec(-100.0f64..100.0, 40), tail in -1e6f64..1e6) {
        let g = Grid::from_vec(20, 2, vals).unwrap();
        let mask = Mask::full(20, 2);
        let norm = Normalizer::fit(&g, &mask, 0..14).unwrap();
        let back = norm.denormalize(&norm.normalize(&g).unwrap()).unwrap();
        for (a, b) in back.as_slice().iter().zip(g.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
        let mut changed = g.clone();
        for l in 14..20 {
            changed.set(l, 0, tail);
        }
        prop_assert_eq!(Normalizer::fit(&changed, &mask, 0..14).unwrap(), norm);
    }
}
