//! Neighbourhood and truncated-SVD rating completion, used as reference
//! methods next to the comparison-trained model.

use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ratings::RatingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KnnMode {
    /// Predict from the user's ratings of similar items.
    #[default]
    ItemBased,
    /// Predict from similar users' ratings of the item.
    UserBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Similarity {
    /// Cosine of mean-centred rating vectors (unobserved entries count as 0).
    #[default]
    Cosine,
    /// Pearson correlation over co-rated entries.
    Pearson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub mode: KnnMode,
    pub similarity: Similarity,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 10,
            mode: KnnMode::ItemBased,
            similarity: Similarity::Cosine,
        }
    }
}

impl FromStr for KnnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "item" | "item-based" => Ok(KnnMode::ItemBased),
            "user" | "user-based" => Ok(KnnMode::UserBased),
            _ => Err(Error::Config(format!("unknown kNN mode `{s}`"))),
        }
    }
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "pearson" => Ok(Similarity::Pearson),
            _ => Err(Error::Config(format!("unknown similarity `{s}`"))),
        }
    }
}

/// Similarity of columns `a` and `b` of `x`, observed where `mask` is set.
fn column_similarity(
    x: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    means: &[f64],
    a: usize,
    b: usize,
    kind: Similarity,
) -> f64 {
    let rows = x.nrows();
    let (num, da, db) = match kind {
        Similarity::Cosine => {
            let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
            for r in 0..rows {
                let va = mask[(r, a)].then(|| x[(r, a)] - means[a]);
                let vb = mask[(r, b)].then(|| x[(r, b)] - means[b]);
                if let Some(va) = va {
                    da += va * va;
                }
                if let Some(vb) = vb {
                    db += vb * vb;
                }
                if let (Some(va), Some(vb)) = (va, vb) {
                    num += va * vb;
                }
            }
            (num, da, db)
        }
        Similarity::Pearson => {
            let common: Vec<usize> = (0..rows).filter(|&r| mask[(r, a)] && mask[(r, b)]).collect();
            if common.len() < 2 {
                return 0.0;
            }
            let n = common.len() as f64;
            let ma = common.iter().map(|&r| x[(r, a)]).sum::<f64>() / n;
            let mb = common.iter().map(|&r| x[(r, b)]).sum::<f64>() / n;
            let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
            for &r in &common {
                let (va, vb) = (x[(r, a)] - ma, x[(r, b)] - mb);
                num += va * vb;
                da += va * va;
                db += vb * vb;
            }
            (num, da, db)
        }
    };
    if da <= 0.0 || db <= 0.0 {
        0.0
    } else {
        num / (da.sqrt() * db.sqrt())
    }
}

/// Fills unobserved cells of `x` from the `k` most similar columns, treating
/// columns as the entities being compared.
fn complete_by_columns(
    x: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    k: usize,
    kind: Similarity,
    fallback: &dyn Fn(usize, usize) -> f64,
) -> DMatrix<f64> {
    let (rows, cols) = x.shape();
    let means: Vec<f64> = (0..cols)
        .map(|c| {
            let (sum, n) = (0..rows)
                .filter(|&r| mask[(r, c)])
                .fold((0.0, 0usize), |(s, n), r| (s + x[(r, c)], n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        })
        .collect();
    let mut sim = DMatrix::zeros(cols, cols);
    for a in 0..cols {
        for b in a + 1..cols {
            let s = column_similarity(x, mask, &means, a, b, kind);
            sim[(a, b)] = s;
            sim[(b, a)] = s;
        }
    }

    let mut out = x.clone();
    let mut neighbours: Vec<(f64, usize)> = Vec::with_capacity(cols);
    for c in 0..cols {
        for r in 0..rows {
            if mask[(r, c)] {
                continue;
            }
            neighbours.clear();
            neighbours.extend(
                (0..cols)
                    .filter(|&o| o != c && mask[(r, o)] && sim[(c, o)] > 0.0)
                    .map(|o| (sim[(c, o)], o)),
            );
            neighbours.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            neighbours.truncate(k);
            let weight: f64 = neighbours.iter().map(|n| n.0).sum();
            out[(r, c)] = if weight > 0.0 {
                neighbours.iter().map(|&(s, o)| s * x[(r, o)]).sum::<f64>() / weight
            } else {
                fallback(r, c)
            };
        }
    }
    out
}

/// Dense completion by k-nearest-neighbour collaborative filtering.
///
/// Observed cells are passed through unchanged. Each unobserved cell gets the
/// similarity-weighted mean of the ratings of its `k` most similar,
/// positively correlated neighbours; without any neighbour it falls back to
/// the item mean, then the global mean.
pub fn knn_complete(ratings: &RatingMatrix, cfg: &KnnConfig) -> Result<DMatrix<f64>> {
    if cfg.k == 0 {
        return Err(Error::Config("kNN needs k >= 1".into()));
    }
    let global = ratings
        .global_mean()
        .ok_or_else(|| Error::InvalidInput("cannot complete an empty rating matrix".into()))?;
    let item_means = ratings.item_means();
    let fallback = |_user: usize, item: usize| item_means[item].unwrap_or(global);

    let x = ratings.to_dense(0.0);
    let mask = ratings.mask();
    Ok(match cfg.mode {
        KnnMode::ItemBased => complete_by_columns(&x, &mask, cfg.k, cfg.similarity, &|u, m| fallback(u, m)),
        KnnMode::UserBased => complete_by_columns(&x.transpose(), &mask.transpose(), cfg.k, cfg.similarity, &|m, u| {
            fallback(u, m)
        })
        .transpose(),
    })
}

/// Singular values in descending order.
pub fn singular_values(matrix: &DMatrix<f64>) -> Vec<f64> {
    let mut values: Vec<f64> = matrix.clone().singular_values().iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    values
}

/// Best rank-`rank` approximation in Frobenius norm.
pub fn truncate_rank(matrix: &DMatrix<f64>, rank: usize) -> Result<DMatrix<f64>> {
    let max = matrix.nrows().min(matrix.ncols());
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    let svd = matrix.clone().svd(true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut out = DMatrix::zeros(matrix.nrows(), matrix.ncols());
    for &t in &order[..rank] {
        out += svd.singular_values[t] * u.column(t) * v_t.row(t);
    }
    Ok(out)
}

/// Item-mean imputation followed by rank-`rank` truncation.
pub fn svd_complete(ratings: &RatingMatrix, rank: usize) -> Result<DMatrix<f64>> {
    let max = ratings.num_users().min(ratings.num_items());
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    truncate_rank(&impute_item_means(ratings)?, rank)
}

/// Dense matrix with every unobserved cell set to its item mean (global mean
/// for unrated items).
pub fn impute_item_means(ratings: &RatingMatrix) -> Result<DMatrix<f64>> {
    let global = ratings
        .global_mean()
        .ok_or_else(|| Error::InvalidInput("cannot complete an empty rating matrix".into()))?;
    let means = ratings.item_means();
    let mut x = DMatrix::from_fn(ratings.num_users(), ratings.num_items(), |_, m| {
        means[m].unwrap_or(global)
    });
    for e in ratings.entries() {
        x[(e.user, e.item)] = e.value;
    }
    Ok(x)
}
