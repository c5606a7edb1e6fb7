mod common;

use std::path::Path;

use cpr::baselines::singular_values;
use cpr::comparisons::{read_comparisons, write_comparisons};
use cpr::evaluation::normalize_trace;
use cpr::ratings::{Rating, RatingScale};
use cpr::*;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn ratings_strategy() -> impl Strategy<Value = RatingMatrix> {
    (1usize..7, 1usize..7).prop_flat_map(|(nu, ni)| {
        proptest::collection::vec(proptest::option::weighted(0.7, 1u8..=5), nu * ni).prop_map(move |cells| {
            let entries = cells
                .iter()
                .enumerate()
                .filter_map(|(idx, v)| {
                    v.map(|v| Rating {
                        user: idx / ni,
                        item: idx % ni,
                        value: v as f64,
                    })
                })
                .collect();
            RatingMatrix::new(nu, ni, RatingScale::FIVE_STAR, entries).unwrap()
        })
    })
}

/// Random acyclic relations: each owner orders its nodes by a random key and
/// keeps a random subset of the pairs consistent with that order.
fn acyclic_set_strategy() -> impl Strategy<Value = ComparisonSet> {
    (2usize..6, 2usize..6).prop_flat_map(|(nu, ni)| {
        let item_keys = proptest::collection::vec(proptest::collection::vec(any::<u16>(), ni), nu);
        let user_keys = proptest::collection::vec(proptest::collection::vec(any::<u16>(), nu), ni);
        let keep = proptest::collection::vec(any::<bool>(), nu * ni * ni + ni * nu * nu);
        (item_keys, user_keys, keep).prop_map(move |(ik, uk, keep)| {
            let mut bits = keep.into_iter();
            let mut items = Vec::new();
            for (user, keys) in ik.iter().enumerate() {
                for a in 0..ni {
                    for b in 0..ni {
                        let keep = bits.next().unwrap();
                        if a != b && (keys[a], a) > (keys[b], b) && keep {
                            items.push(ItemComparison {
                                user,
                                preferred: a,
                                other: b,
                            });
                        }
                    }
                }
            }
            let mut users = Vec::new();
            for (item, keys) in uk.iter().enumerate() {
                for a in 0..nu {
                    for b in 0..nu {
                        let keep = bits.next().unwrap();
                        if a != b && (keys[a], a) > (keys[b], b) && keep {
                            users.push(UserComparison {
                                item,
                                stronger: a,
                                weaker: b,
                            });
                        }
                    }
                }
            }
            ComparisonSet::new(nu, ni, items, users).unwrap()
        })
    })
}

fn params_strategy(max_rank: usize) -> impl Strategy<Value = ModelParams> {
    (1usize..5, 1usize..5, 1..=max_rank).prop_flat_map(|(nu, ni, r)| {
        (
            proptest::collection::vec(-2.0f64..2.0, nu * r),
            proptest::collection::vec(-2.0f64..2.0, ni * r),
        )
            .prop_map(move |(u, i)| ModelParams::new(nu, ni, r, u, i).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 128,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn extracted_relations_are_antisymmetric_and_closed(ratings in ratings_strategy()) {
        let set = extract_comparisons(&ratings, false).unwrap();
        prop_assert!(set.check_antisymmetry().is_ok());
        let closed = transitive_closure(&set).unwrap();
        prop_assert_eq!(&closed, &set);
        prop_assert_eq!(extract_comparisons(&ratings, true).unwrap(), set);
    }

    #[test]
    fn extracted_comparisons_follow_rating_order(ratings in ratings_strategy()) {
        let set = extract_comparisons(&ratings, false).unwrap();
        for c in set.item_comparisons() {
            prop_assert!(ratings.get(c.user, c.preferred).unwrap() > ratings.get(c.user, c.other).unwrap());
        }
        for c in set.user_comparisons() {
            prop_assert!(ratings.get(c.stronger, c.item).unwrap() > ratings.get(c.weaker, c.item).unwrap());
        }
        let mut strict_pairs = 0;
        for row in ratings.by_user() {
            for (a, &(_, va)) in row.iter().enumerate() {
                strict_pairs += row[a + 1..].iter().filter(|&&(_, vb)| vb != va).count();
            }
        }
        prop_assert_eq!(set.item_comparisons().len(), strict_pairs);
    }

    #[test]
    fn closure_is_idempotent(set in acyclic_set_strategy()) {
        let once = transitive_closure(&set).unwrap();
        prop_assert!(once.check_antisymmetry().is_ok());
        prop_assert!(once.len() >= set.len());
        prop_assert_eq!(transitive_closure(&once).unwrap(), once);
    }

    #[test]
    fn stored_comparisons_load_back_identically(set in acyclic_set_strategy()) {
        let mut bytes = Vec::new();
        write_comparisons(&set, &mut bytes).unwrap();
        let back = read_comparisons(bytes.as_slice(), Path::new("mem")).unwrap();
        prop_assert_eq!(back, set);
    }

    #[test]
    fn distinct_ratings_give_every_pair(n in 1usize..9, seed in any::<u64>()) {
        let mut values: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            values.swap(i, (s >> 33) as usize % (i + 1));
        }
        let entries = values
            .iter()
            .enumerate()
            .map(|(item, &v)| Rating { user: 0, item, value: 1.0 + v as f64 * 0.5 })
            .collect();
        let ratings = RatingMatrix::new(1, n, RatingScale::new(1.0, 5.0).unwrap(), entries).unwrap();
        let set = extract_comparisons(&ratings, false).unwrap();
        prop_assert_eq!(set.item_comparisons().len(), n * (n - 1) / 2);
        prop_assert_eq!(transitive_closure(&set).unwrap().item_comparisons().len(), n * (n - 1) / 2);
    }

    #[test]
    fn link_is_a_symmetric_increasing_probability(c in 0.1f64..8.0, x in -5.0f64..5.0, dx in 1e-3f64..1.0) {
        let p = link(c, x);
        prop_assert!(p > 0.0);
        if c * x < 15.0 {
            prop_assert!(p < 1.0);
        }
        prop_assert!((p - (0.5 + 0.5 * (c * x).tanh())).abs() <= 4.0 * f64::EPSILON);
        if c * (x + dx) < 15.0 {
            prop_assert!(link(c, x + dx) > p);
        }
        prop_assert!((link(c, x) + link(c, -x) - 1.0).abs() <= 2.0 * f64::EPSILON);
        prop_assert!((log_link(c, x) - p.ln()).abs() <= 1e-12 * p.ln().abs().max(1e-300) + 1e-15);
    }

    #[test]
    fn steeper_link_sharpens_log_probability(c in 0.5f64..4.0, dc in 0.05f64..2.0, x in 1e-2f64..5.0) {
        prop_assert!(log_link(c + dc, -x) < log_link(c, -x));
        prop_assert!(log_link(c + dc, x) > log_link(c, x));
    }

    #[test]
    fn pairwise_scores_are_antisymmetric_differences(params in params_strategy(3), seed in any::<u64>()) {
        let nu = params.num_users();
        let ni = params.num_items();
        let u = seed as usize % nu;
        if ni >= 2 {
            let (k, l) = (0, ni - 1);
            let d = pairwise_score_item(&params, u, k, l).unwrap();
            prop_assert_eq!(d, -pairwise_score_item(&params, u, l, k).unwrap());
            prop_assert!((d - (score(&params, u, k).unwrap() - score(&params, u, l).unwrap())).abs() < 1e-12);
        }
        if nu >= 2 {
            let m = seed as usize % ni;
            let d = pairwise_score_user(&params, 0, nu - 1, m).unwrap();
            prop_assert_eq!(d, -pairwise_score_user(&params, nu - 1, 0, m).unwrap());
        }
        let x = recover_matrix(&params);
        for i in 0..nu {
            for m in 0..ni {
                prop_assert_eq!(x[(i, m)], score(&params, i, m).unwrap());
            }
        }
    }

    #[test]
    fn objective_is_rotation_invariant(params in params_strategy(3), seed in any::<u64>(), lambda in 0.0f64..1.0) {
        let mut rng = common::rng(seed);
        let r = params.rank();
        let q = common::random_matrix(&mut rng, r, r).qr().q();
        let rotated = ModelParams::from_matrices(&(params.user_matrix() * &q), &(params.item_matrix() * &q)).unwrap();
        let set = common::random_complete_set(&mut rng, params.num_users(), params.num_items());
        let hyper = Hyperparams { lambda, rank: r, ..Hyperparams::default() };
        let a = cpr_objective(&params, &set, &hyper).unwrap();
        let b = cpr_objective(&rotated, &set, &hyper).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn mismatches_ignore_monotone_transforms(params in params_strategy(3), seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let set = common::random_complete_set(&mut rng, params.num_users(), params.num_items());
        let x = recover_matrix(&params);
        let base = count_mismatches(&x, &set).unwrap();
        prop_assert_eq!(count_mismatches(&x.map(|v| 3.0 * v + 1.0), &set).unwrap(), base);
        prop_assert_eq!(count_mismatches(&x.map(|v| v.powi(3)), &set).unwrap(), base);
        prop_assert_eq!(count_mismatches(&x.map(|v| -v), &set).unwrap(), set.len() - base + ties(&x, &set));
    }

    #[test]
    fn sigma_ratio_is_scale_invariant(seed in any::<u64>(), alpha in 1e-3f64..1e3) {
        let mut rng = common::rng(seed);
        let m = common::random_matrix(&mut rng, 5, 4);
        for r in 1..=4 {
            let a = singular_diagnostics(&m, r).unwrap();
            let b = singular_diagnostics(&(&m * alpha), r).unwrap();
            prop_assert!((a.sigma_ratio - b.sigma_ratio).abs() < 1e-10);
            prop_assert!((b.sigma_r_max - alpha * a.sigma_r_max).abs() < 1e-9 * alpha);
            prop_assert!((0.0..=1.0).contains(&a.sigma_ratio));
        }
    }

    #[test]
    fn knn_commutes_with_item_permutation(ratings in ratings_strategy(), seed in any::<u64>()) {
        prop_assume!(!ratings.is_empty());
        let ni = ratings.num_items();
        let mut perm: Vec<usize> = (0..ni).collect();
        let mut s = seed;
        for i in (1..ni).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted = RatingMatrix::new(
            ratings.num_users(),
            ni,
            ratings.scale(),
            ratings.entries().iter().map(|e| Rating { item: perm[e.item], ..*e }).collect(),
        ).unwrap();
        let a = knn_complete(&ratings, &KnnConfig::default()).unwrap();
        let b = knn_complete(&permuted, &KnnConfig::default()).unwrap();
        for u in 0..ratings.num_users() {
            for m in 0..ni {
                prop_assert!((a[(u, m)] - b[(u, perm[m])]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn svd_completion_has_bounded_numerical_rank(ratings in ratings_strategy(), r in 1usize..6) {
        prop_assume!(!ratings.is_empty());
        let max = ratings.num_users().min(ratings.num_items());
        prop_assume!(r <= max);
        let x = svd_complete(&ratings, r).unwrap();
        let sigma = singular_values(&x);
        for s in &sigma[r..] {
            prop_assert!(*s <= 1e-8 * sigma[0].max(1e-300));
        }
    }

    #[test]
    fn first_element_normalisation_starts_at_one(trace in proptest::collection::vec(0.01f64..100.0, 1..30)) {
        let trace: Vec<Option<f64>> = trace.into_iter().map(Some).collect();
        let out = normalize_trace("t", &trace, Normalization::FirstElement).unwrap();
        prop_assert_eq!(out[0], Some(1.0));
    }
}

fn ties(x: &DMatrix<f64>, set: &ComparisonSet) -> usize {
    let items = set
        .item_comparisons()
        .iter()
        .filter(|c| x[(c.user, c.preferred)] == x[(c.user, c.other)])
        .count();
    let users = set
        .user_comparisons()
        .iter()
        .filter(|c| x[(c.stronger, c.item)] == x[(c.weaker, c.item)])
        .count();
    items + users
}
