#![allow(dead_code)]

use cpr::{Comparison, ComparisonSet, Hyperparams, ItemComparison, ModelParams, UserComparison};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_params(rng: &mut ChaCha8Rng, nu: usize, ni: usize, rank: usize, scale: f64) -> ModelParams {
    let users = (0..nu * rank).map(|_| rng.random_range(-scale..scale)).collect();
    let items = (0..ni * rank).map(|_| rng.random_range(-scale..scale)).collect();
    ModelParams::new(nu, ni, rank, users, items).unwrap()
}

/// One comparison for every unordered pair, with a random orientation.
pub fn random_complete_set(rng: &mut ChaCha8Rng, nu: usize, ni: usize) -> ComparisonSet {
    let mut items = Vec::new();
    for user in 0..nu {
        for a in 0..ni {
            for b in a + 1..ni {
                let (preferred, other) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
                items.push(ItemComparison { user, preferred, other });
            }
        }
    }
    let mut users = Vec::new();
    for item in 0..ni {
        for a in 0..nu {
            for b in a + 1..nu {
                let (stronger, weaker) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
                users.push(UserComparison { item, stronger, weaker });
            }
        }
    }
    ComparisonSet::new(nu, ni, items, users).unwrap()
}

/// A random subset of the complete set, keeping each pair with probability `keep`.
pub fn random_sparse_set(rng: &mut ChaCha8Rng, nu: usize, ni: usize, keep: f64) -> ComparisonSet {
    let full = random_complete_set(rng, nu, ni);
    let items = full
        .item_comparisons()
        .iter()
        .copied()
        .filter(|_| rng.random_bool(keep))
        .collect();
    let users = full
        .user_comparisons()
        .iter()
        .copied()
        .filter(|_| rng.random_bool(keep))
        .collect();
    ComparisonSet::new(nu, ni, items, users).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for t in 0..a.len() {
        s += a[t] * b[t];
    }
    s
}

/// `ln(1/2 + tanh(z)/2)` written as `z - ln(2 cosh z)`, which keeps full
/// precision for strongly negative `z` without sharing the library's form.
fn ln_link(c: f64, x: f64) -> f64 {
    let z = c * x;
    z - (2.0 * z.cosh()).ln()
}

/// Term-by-term log posterior.
pub fn naive_objective(params: &ModelParams, set: &ComparisonSet, hyper: &Hyperparams) -> f64 {
    let p = |u: usize| params.user(u).to_vec();
    let q = |m: usize| params.item(m).to_vec();
    let mut total = 0.0;
    for c in set.user_comparisons() {
        let x = dot(&p(c.stronger), &q(c.item)) - dot(&p(c.weaker), &q(c.item));
        total += ln_link(hyper.c_m, x);
    }
    for c in set.item_comparisons() {
        let x = dot(&p(c.user), &q(c.preferred)) - dot(&p(c.user), &q(c.other));
        total += ln_link(hyper.c_u, x);
    }
    let mut norm = 0.0;
    for u in 0..params.num_users() {
        norm += dot(&p(u), &p(u));
    }
    for m in 0..params.num_items() {
        norm += dot(&q(m), &q(m));
    }
    total - 0.5 * hyper.lambda * norm
}

pub fn objective_on(params: &ModelParams, batch: &[Comparison], hyper: &Hyperparams, nu: usize, ni: usize) -> f64 {
    let mut items = Vec::new();
    let mut users = Vec::new();
    for c in batch {
        match *c {
            Comparison::Item(c) => items.push(c),
            Comparison::User(c) => users.push(c),
        }
    }
    let set = ComparisonSet::new(nu, ni, items, users).unwrap();
    cpr::cpr_objective(params, &set, hyper).unwrap()
}

/// `params` with one coordinate shifted; `index` runs over user factors first.
pub fn perturbed(params: &ModelParams, index: usize, delta: f64) -> ModelParams {
    let mut users = params.user_factors().to_vec();
    let mut items = params.item_factors().to_vec();
    if index < users.len() {
        users[index] += delta;
    } else {
        items[index - users.len()] += delta;
    }
    ModelParams::new(params.num_users(), params.num_items(), params.rank(), users, items).unwrap()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut a = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut values: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    values.sort_by(|x, y| y.total_cmp(x));
    values
}

/// Singular values from the eigenvalues of the Gram matrix.
pub fn gram_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let gram = if m.nrows() >= m.ncols() {
        m.transpose() * m
    } else {
        m * m.transpose()
    };
    jacobi_eigenvalues(&gram)
        .into_iter()
        .map(|v| v.max(0.0).sqrt())
        .collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Largest relative deviation between the analytic full gradient and
/// central differences on a random instance drawn from `seed`.
pub fn max_gradient_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let nu = rng.random_range(2..=10);
    let ni = rng.random_range(2..=10);
    let rank = rng.random_range(1..=4);
    let set = random_sparse_set(&mut rng, nu, ni, 0.5);
    let params = random_params(&mut rng, nu, ni, rank, 1.0);
    let hyper = Hyperparams {
        c_m: rng.random_range(0.5..4.0),
        c_u: rng.random_range(0.5..4.0),
        lambda: if rng.random_bool(0.5) { 0.1 } else { 0.0 },
        rank,
        ..Hyperparams::default()
    };
    let grad = cpr::full_gradient(&params, &set, &hyper).unwrap();
    let analytic: Vec<f64> = grad.user_grads().iter().chain(grad.item_grads()).copied().collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (idx, &a) in analytic.iter().enumerate() {
        let up = cpr::cpr_objective(&perturbed(&params, idx, h), &set, &hyper).unwrap();
        let down = cpr::cpr_objective(&perturbed(&params, idx, -h), &set, &hyper).unwrap();
        let fd = (up - down) / (2.0 * h);
        let err = if fd.abs().max(a.abs()) < 1e-8 {
            (a - fd).abs()
        } else {
            (a - fd).abs() / fd.abs().max(a.abs())
        };
        worst = worst.max(err);
    }
    worst
}
