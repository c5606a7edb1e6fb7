//! Latent-factor scoring and the log-posterior ranking criterion.
//!
//! A user `u` and an item `m` each own an `r`-dimensional factor row; the
//! estimated rating is their inner product. Every comparison contributes
//! `ln f(c, d)` where `d` is the difference of two estimated ratings and
//! `f(c, x) = 1/2 + tanh(c x)/2`. An isotropic Gaussian prior with precision
//! `lambda` on every factor row adds `-lambda/2 * ||row||^2`. Additive
//! constants (evidence, Gaussian normaliser) are dropped, so objective values
//! are only comparable for fixed `(lambda, c_m, c_u)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::comparisons::{ComparisonSet, ItemComparison, UserComparison};
use crate::error::{Error, Result};

/// User factors `P` (`num_users × rank`) and item factors `Q`
/// (`num_items × rank`), both stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    num_users: usize,
    num_items: usize,
    rank: usize,
    users: Vec<f64>,
    items: Vec<f64>,
}

impl ModelParams {
    pub fn new(num_users: usize, num_items: usize, rank: usize, users: Vec<f64>, items: Vec<f64>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidInput("rank must be at least 1".into()));
        }
        if users.len() != num_users * rank || items.len() != num_items * rank {
            return Err(Error::DimensionMismatch(format!(
                "expected {}x{rank} user and {}x{rank} item factors, got {} and {} values",
                num_users,
                num_items,
                users.len(),
                items.len()
            )));
        }
        if users.iter().chain(&items).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("factor entries must be finite".into()));
        }
        Ok(Self {
            num_users,
            num_items,
            rank,
            users,
            items,
        })
    }

    pub fn zeros(num_users: usize, num_items: usize, rank: usize) -> Result<Self> {
        Self::new(
            num_users,
            num_items,
            rank,
            vec![0.0; num_users * rank],
            vec![0.0; num_items * rank],
        )
    }

    pub fn from_matrices(users: &DMatrix<f64>, items: &DMatrix<f64>) -> Result<Self> {
        if users.ncols() != items.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "user factors have {} columns, item factors {}",
                users.ncols(),
                items.ncols()
            )));
        }
        let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        Self::new(
            users.nrows(),
            items.nrows(),
            users.ncols(),
            row_major(users),
            row_major(items),
        )
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    #[inline]
    pub fn user(&self, u: usize) -> &[f64] {
        &self.users[u * self.rank..(u + 1) * self.rank]
    }

    #[inline]
    pub fn item(&self, m: usize) -> &[f64] {
        &self.items[m * self.rank..(m + 1) * self.rank]
    }

    pub fn user_factors(&self) -> &[f64] {
        &self.users
    }

    pub fn item_factors(&self) -> &[f64] {
        &self.items
    }

    pub(crate) fn factors_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.users, &mut self.items)
    }

    pub fn user_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.num_users, self.rank, &self.users)
    }

    pub fn item_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.num_items, self.rank, &self.items)
    }

    fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.num_users {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: u,
                size: self.num_users,
            });
        }
        Ok(())
    }

    fn check_item(&self, m: usize) -> Result<()> {
        if m >= self.num_items {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: m,
                size: self.num_items,
            });
        }
        Ok(())
    }

    pub(crate) fn check_compatible(&self, set: &ComparisonSet) -> Result<()> {
        if set.num_users() != self.num_users || set.num_items() != self.num_items {
            return Err(Error::DimensionMismatch(format!(
                "comparisons over {}x{} but model is {}x{}",
                set.num_users(),
                set.num_items(),
                self.num_users,
                self.num_items
            )));
        }
        Ok(())
    }

    /// Squared Frobenius norm of all factor rows.
    pub fn squared_norm(&self) -> f64 {
        self.users.iter().chain(&self.items).map(|v| v * v).sum()
    }
}

/// Model and learning hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Steepness for user-user comparisons, shared across items.
    pub c_m: f64,
    /// Steepness for item-item comparisons, shared across users.
    pub c_u: f64,
    /// Prior precision on every factor row.
    pub lambda: f64,
    /// Learning rate.
    pub mu: f64,
    pub batch_size: usize,
    pub rank: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            c_m: 1.0,
            c_u: 1.0,
            lambda: 2.0,
            mu: 0.003,
            batch_size: 32,
            rank: 10,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.c_m > 0.0 && self.c_m.is_finite()) {
            return bad(format!("c_m must be positive, got {}", self.c_m));
        }
        if !(self.c_u > 0.0 && self.c_u.is_finite()) {
            return bad(format!("c_u must be positive, got {}", self.c_u));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be nonnegative, got {}", self.mu));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        Ok(())
    }
}

/// `1/2 + tanh(c x)/2`, the probability that a comparison with score
/// difference `x` is oriented as observed. Evaluated as the logistic
/// `1/(1 + e^{-2cx})`, which stays positive far into the lower tail.
pub fn link(c: f64, x: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * c * x).exp())
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `ln link(c, x)`, evaluated as `-ln(1 + e^{-2cx})`.
pub fn log_link(c: f64, x: f64) -> f64 {
    -softplus(-2.0 * c * x)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn item_difference(params: &ModelParams, c: &ItemComparison) -> f64 {
    let p = params.user(c.user);
    let qk = params.item(c.preferred);
    let ql = params.item(c.other);
    p.iter().zip(qk.iter().zip(ql)).map(|(p, (a, b))| p * (a - b)).sum()
}

#[inline]
pub(crate) fn user_difference(params: &ModelParams, c: &UserComparison) -> f64 {
    let q = params.item(c.item);
    let pi = params.user(c.stronger);
    let pj = params.user(c.weaker);
    q.iter().zip(pi.iter().zip(pj)).map(|(q, (a, b))| q * (a - b)).sum()
}

/// Estimated rating of `user` for `item`.
pub fn score(params: &ModelParams, user: usize, item: usize) -> Result<f64> {
    params.check_user(user)?;
    params.check_item(item)?;
    Ok(dot(params.user(user), params.item(item)))
}

/// `score(u, k) - score(u, l)`.
pub fn pairwise_score_item(params: &ModelParams, u: usize, k: usize, l: usize) -> Result<f64> {
    params.check_user(u)?;
    params.check_item(k)?;
    params.check_item(l)?;
    if k == l {
        return Err(Error::InvalidInput(format!("item {k} compared with itself")));
    }
    Ok(item_difference(
        params,
        &ItemComparison {
            user: u,
            preferred: k,
            other: l,
        },
    ))
}

/// `score(i, m) - score(j, m)`.
pub fn pairwise_score_user(params: &ModelParams, i: usize, j: usize, m: usize) -> Result<f64> {
    params.check_user(i)?;
    params.check_user(j)?;
    params.check_item(m)?;
    if i == j {
        return Err(Error::InvalidInput(format!("user {i} compared with itself")));
    }
    Ok(user_difference(
        params,
        &UserComparison {
            item: m,
            stronger: i,
            weaker: j,
        },
    ))
}

/// The ranking log-posterior up to an additive constant: the log-likelihood
/// of every comparison in `set` minus `lambda/2` times the squared norm of all
/// factors. Sums in a fixed order (user comparisons, then item comparisons,
/// then the prior).
pub fn cpr_objective(params: &ModelParams, set: &ComparisonSet, hyper: &Hyperparams) -> Result<f64> {
    params.check_compatible(set)?;
    let mut total = 0.0;
    for c in set.user_comparisons() {
        total += log_link(hyper.c_m, user_difference(params, c));
    }
    for c in set.item_comparisons() {
        total += log_link(hyper.c_u, item_difference(params, c));
    }
    Ok(total - 0.5 * hyper.lambda * params.squared_norm())
}

/// Dense `P Q^T`.
pub fn recover_matrix(params: &ModelParams) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(params.num_users, params.num_items);
    for u in 0..params.num_users {
        let p = params.user(u);
        for m in 0..params.num_items {
            out[(u, m)] = dot(p, params.item(m));
        }
    }
    out
}

/// Encoding for [`save_params`] / [`load_params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamsFormat {
    /// Header line `num_users num_items rank`, then one factor row per line:
    /// all of `P`, then all of `Q`.
    Text,
    /// Magic `CPRP`, three little-endian `u64` dimensions, then the `f64`
    /// entries of `P` and `Q` row-major, little-endian.
    Binary,
}

const BINARY_MAGIC: &[u8; 4] = b"CPRP";

pub fn write_params<W: Write>(params: &ModelParams, format: ParamsFormat, mut out: W) -> std::io::Result<()> {
    match format {
        ParamsFormat::Text => {
            writeln!(out, "{} {} {}", params.num_users, params.num_items, params.rank)?;
            for row in params.users.chunks(params.rank).chain(params.items.chunks(params.rank)) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        ParamsFormat::Binary => {
            out.write_all(BINARY_MAGIC)?;
            for dim in [params.num_users, params.num_items, params.rank] {
                out.write_all(&(dim as u64).to_le_bytes())?;
            }
            for v in params.users.iter().chain(&params.items) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()
}

pub fn save_params(params: &ModelParams, format: ParamsFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_params(params, format, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Reads either encoding, detected from the leading magic bytes.
pub fn read_params<R: Read>(mut input: R, origin: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| Error::io(origin, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        read_binary(&bytes[4..], origin)
    } else {
        read_text(&bytes[..], origin)
    }
}

fn read_binary(bytes: &[u8], origin: &Path) -> Result<ModelParams> {
    let mut words = bytes.chunks_exact(8).map(|w| <[u8; 8]>::try_from(w).unwrap());
    if !bytes.len().is_multiple_of(8) || bytes.len() < 24 {
        return Err(Error::parse(origin, 0, "truncated binary parameter file"));
    }
    let mut dim = || u64::from_le_bytes(words.next().unwrap()) as usize;
    let (nu, ni, rank) = (dim(), dim(), dim());
    let values: Vec<f64> = words.map(f64::from_le_bytes).collect();
    let expected = nu
        .checked_add(ni)
        .and_then(|n| n.checked_mul(rank))
        .ok_or_else(|| Error::parse(origin, 0, "dimensions overflow"))?;
    if values.len() != expected {
        return Err(Error::parse(
            origin,
            0,
            format!("expected {expected} values, found {}", values.len()),
        ));
    }
    let items = values[nu * rank..].to_vec();
    let mut users = values;
    users.truncate(nu * rank);
    ModelParams::new(nu, ni, rank, users, items)
}

fn read_text<R: BufRead>(input: R, origin: &Path) -> Result<ModelParams> {
    let mut header: Option<(usize, usize, usize)> = None;
    let mut values = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match header {
            None => {
                let dims: Vec<usize> = line
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::parse(origin, lineno, "malformed header"))?;
                if dims.len() != 3 {
                    return Err(Error::parse(
                        origin,
                        lineno,
                        "expected header `num_users num_items rank`",
                    ));
                }
                header = Some((dims[0], dims[1], dims[2]));
            }
            Some((_, _, rank)) => {
                let before = values.len();
                for field in line.split_whitespace() {
                    let v: f64 = field
                        .parse()
                        .map_err(|_| Error::parse(origin, lineno, format!("`{field}` is not a number")))?;
                    values.push(v);
                }
                if values.len() - before != rank {
                    return Err(Error::parse(
                        origin,
                        lineno,
                        format!("expected {rank} values, found {}", values.len() - before),
                    ));
                }
            }
        }
    }
    let (nu, ni, rank) = header.ok_or_else(|| Error::parse(origin, 1, "empty parameter file"))?;
    if values.len() != (nu + ni) * rank {
        return Err(Error::parse(origin, 0, format!("expected {} factor rows", nu + ni)));
    }
    let items = values.split_off(nu * rank);
    ModelParams::new(nu, ni, rank, values, items)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(users: &[&[f64]], items: &[&[f64]]) -> ModelParams {
        let rank = users[0].len();
        ModelParams::new(users.len(), items.len(), rank, users.concat(), items.concat()).unwrap()
    }

    #[test]
    fn link_values() {
        for c in [0.1, 1.0, 7.5] {
            assert_eq!(link(c, 0.0), 0.5);
            for x in [-3.0, -0.2, 0.4, 2.0] {
                assert_relative_eq!(link(c, x) + link(c, -x), 1.0, epsilon = 1e-15);
            }
        }
        // 1/2 + tanh(1)/2 to 30 digits: 0.880797077977882444059729141302
        assert_relative_eq!(link(1.0, 1.0), 0.880_797_077_977_882_4, epsilon = 1e-15);
    }

    #[test]
    fn log_link_is_stable() {
        assert_relative_eq!(log_link(1.0, 1.0), link(1.0, 1.0).ln(), epsilon = 1e-15);
        assert!(log_link(1.0, -800.0).is_finite());
        assert_relative_eq!(log_link(1.0, -800.0), -1600.0, epsilon = 1e-9);
        assert_eq!(log_link(2.0, 800.0), 0.0);
    }

    #[test]
    fn steeper_link_sharpens_preferences() {
        for x in [-1.5, -0.1, 0.1, 1.5] {
            let (lo, hi) = (log_link(0.5, x), log_link(2.0, x));
            if x > 0.0 {
                assert!(hi > lo);
            } else {
                assert!(hi < lo);
            }
        }
    }

    #[test]
    fn scores() {
        let p = params(&[&[1.0, 2.0], &[0.0, 0.0]], &[&[3.0, -1.0]]);
        assert_eq!(score(&p, 0, 0).unwrap(), 1.0);
        assert_eq!(score(&p, 1, 0).unwrap(), 0.0);
        let p = params(&[&[2.0]], &[&[3.0]]);
        assert_eq!(score(&p, 0, 0).unwrap(), 6.0);
        assert!(matches!(
            score(&p, 1, 0),
            Err(Error::IndexOutOfRange { what: "user", .. })
        ));
    }

    #[test]
    fn pairwise_scores() {
        let p = params(&[&[1.0, 0.0], &[1.0, 0.0]], &[&[2.0, 3.0], &[1.0, 1.0]]);
        assert_eq!(pairwise_score_item(&p, 0, 0, 1).unwrap(), 1.0);
        assert_eq!(pairwise_score_item(&p, 0, 1, 0).unwrap(), -1.0);
        assert_eq!(pairwise_score_user(&p, 0, 1, 0).unwrap(), 0.0);
        assert!(pairwise_score_item(&p, 0, 1, 1).is_err());
        assert!(pairwise_score_user(&p, 1, 1, 0).is_err());
        assert!(pairwise_score_user(&p, 0, 2, 0).is_err());
    }

    #[test]
    fn objective_examples() {
        let set = ComparisonSet::new(
            1,
            2,
            vec![ItemComparison {
                user: 0,
                preferred: 0,
                other: 1,
            }],
            vec![],
        )
        .unwrap();
        let hyper = Hyperparams {
            c_u: 1.0,
            lambda: 0.0,
            ..Hyperparams::default()
        };
        let p = params(&[&[1.0]], &[&[1.0], &[0.0]]);
        // ln(1/2 + tanh(1)/2) = -0.126928011042972496...
        assert_relative_eq!(
            cpr_objective(&p, &set, &hyper).unwrap(),
            -0.126_928_011_042_972_5,
            epsilon = 1e-14
        );

        let zero = ModelParams::zeros(1, 2, 3).unwrap();
        assert_relative_eq!(cpr_objective(&zero, &set, &hyper).unwrap(), 0.5f64.ln());
        assert_eq!(cpr_objective(&p, &ComparisonSet::empty(1, 2), &hyper).unwrap(), 0.0);
        assert!(cpr_objective(&p, &ComparisonSet::empty(2, 2), &hyper).is_err());
    }

    #[test]
    fn recovered_matrix_matches_scores() {
        let p = params(&[&[1.0, 2.0], &[0.5, -1.0]], &[&[3.0, -1.0], &[0.0, 2.0], &[1.0, 1.0]]);
        let x = recover_matrix(&p);
        for u in 0..2 {
            for m in 0..3 {
                assert_eq!(x[(u, m)], score(&p, u, m).unwrap());
            }
        }
        assert_eq!(
            recover_matrix(&ModelParams::zeros(2, 3, 2).unwrap()),
            DMatrix::zeros(2, 3)
        );
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ModelParams::new(2, 2, 2, vec![0.0; 3], vec![0.0; 4]).is_err());
        assert!(ModelParams::new(1, 1, 1, vec![f64::NAN], vec![0.0]).is_err());
        assert!(ModelParams::new(1, 1, 0, vec![], vec![]).is_err());
    }

    #[test]
    fn params_round_trip_both_formats() {
        let p = params(
            &[&[0.1, -2.5e-300], &[1.0 / 3.0, 7.0]],
            &[&[f64::MIN_POSITIVE, 3.0], &[-0.0, 1e10]],
        );
        for format in [ParamsFormat::Text, ParamsFormat::Binary] {
            let mut buf = Vec::new();
            write_params(&p, format, &mut buf).unwrap();
            let back = read_params(&buf[..], Path::new("mem")).unwrap();
            assert_eq!(back, p);
            assert!(back
                .user_factors()
                .iter()
                .zip(p.user_factors())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        assert!(Hyperparams {
            c_m: 0.0,
            ..Hyperparams::default()
        }
        .validate()
        .is_err());
        assert!(Hyperparams {
            lambda: -1.0,
            ..Hyperparams::default()
        }
        .validate()
        .is_err());
        assert!(Hyperparams {
            batch_size: 0,
            ..Hyperparams::default()
        }
        .validate()
        .is_err());
        assert!(Hyperparams {
            rank: 0,
            ..Hyperparams::default()
        }
        .validate()
        .is_err());
    }
}
