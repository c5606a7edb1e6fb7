//! MovieLens `u.data` ingestion, subset selection and synthetic low-rank data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ratings::{Rating, RatingMatrix, RatingScale};

/// Original user and item IDs, indexed by dense position.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<u64>,
    pub items: Vec<u64>,
}

impl IdMap {
    /// Identity map over `1..=n` IDs, as written by [`write_movielens`].
    pub fn sequential(num_users: usize, num_items: usize) -> Self {
        Self {
            users: (1..=num_users as u64).collect(),
            items: (1..=num_items as u64).collect(),
        }
    }

    /// Tab-separated `kind dense original` lines.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (dense, id) in self.users.iter().enumerate() {
            writeln!(out, "user\t{dense}\t{id}")?;
        }
        for (dense, id) in self.items.iter().enumerate() {
            writeln!(out, "item\t{dense}\t{id}")?;
        }
        out.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }
}

/// A rating matrix and the IDs its rows and columns came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ratings: RatingMatrix,
    pub ids: IdMap,
}

/// Parses tab-separated `user_id item_id rating timestamp` records.
///
/// IDs are remapped to dense indices in ascending ID order. When a
/// (user, item) pair occurs twice the rating with the later timestamp wins
/// (the later line on equal timestamps). The rating scale is fitted to the
/// observed range.
pub fn read_movielens<R: BufRead>(input: R, origin: &Path) -> Result<Dataset> {
    let mut latest: BTreeMap<(u64, u64), (f64, f64)> = BTreeMap::new();
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                origin,
                lineno,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let field = |i: usize, what: &str| -> Result<&str> {
            if fields[i].is_empty() {
                Err(Error::parse(origin, lineno, format!("empty {what}")))
            } else {
                Ok(fields[i])
            }
        };
        let user: u64 = field(0, "user id")?
            .parse()
            .map_err(|_| Error::parse(origin, lineno, format!("bad user id `{}`", fields[0])))?;
        let item: u64 = field(1, "item id")?
            .parse()
            .map_err(|_| Error::parse(origin, lineno, format!("bad item id `{}`", fields[1])))?;
        let rating: f64 = field(2, "rating")?
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::parse(origin, lineno, format!("bad rating `{}`", fields[2])))?;
        let timestamp: f64 = field(3, "timestamp")?
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::parse(origin, lineno, format!("bad timestamp `{}`", fields[3])))?;
        latest
            .entry((user, item))
            .and_modify(|slot| {
                if timestamp >= slot.1 {
                    *slot = (rating, timestamp);
                }
            })
            .or_insert((rating, timestamp));
    }
    if latest.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no ratings found", origin.display())));
    }

    let users: Vec<u64> = latest
        .keys()
        .map(|k| k.0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let items: Vec<u64> = latest
        .keys()
        .map(|k| k.1)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let entries: Vec<Rating> = latest
        .iter()
        .map(|(&(u, m), &(value, _))| Rating {
            user: users.binary_search(&u).unwrap(),
            item: items.binary_search(&m).unwrap(),
            value,
        })
        .collect();
    let scale = RatingScale::covering(entries.iter().map(|e| e.value)).expect("non-empty");
    let ratings = RatingMatrix::new(users.len(), items.len(), scale, entries)?;
    Ok(Dataset {
        ratings,
        ids: IdMap { users, items },
    })
}

pub fn parse_movielens(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_movielens(BufReader::new(file), path)
}

/// Writes `ratings` in `u.data` layout with the original IDs from `ids` and
/// timestamp 0.
pub fn write_movielens<W: Write>(ratings: &RatingMatrix, ids: &IdMap, mut out: W) -> std::io::Result<()> {
    for e in ratings.entries() {
        writeln!(out, "{}\t{}\t{:?}\t0", ids.users[e.user], ids.items[e.item], e.value)?;
    }
    out.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SubsetRule {
    /// Users and items with the most observed ratings, ties to the smaller
    /// index.
    #[default]
    MostActive,
}

impl FromStr for SubsetRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "most-active" => Ok(SubsetRule::MostActive),
            _ => Err(Error::Config(format!("unknown subset rule `{s}`"))),
        }
    }
}

fn most_active(counts: &[usize], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Keeps `num_users × num_items` of `data` chosen by `rule`, re-indexed in
/// the original index order.
pub fn select_subset(data: &Dataset, num_users: usize, num_items: usize, rule: SubsetRule) -> Result<Dataset> {
    let ratings = &data.ratings;
    if num_users == 0 || num_items == 0 {
        return Err(Error::Config("subset sizes must be positive".into()));
    }
    if num_users > ratings.num_users() || num_items > ratings.num_items() {
        return Err(Error::InvalidInput(format!(
            "requested {num_users}x{num_items} subset of a {}x{} dataset",
            ratings.num_users(),
            ratings.num_items()
        )));
    }
    let (users, items) = match rule {
        SubsetRule::MostActive => {
            let user_counts: Vec<usize> = ratings.by_user().iter().map(Vec::len).collect();
            let item_counts: Vec<usize> = ratings.by_item().iter().map(Vec::len).collect();
            (
                most_active(&user_counts, num_users),
                most_active(&item_counts, num_items),
            )
        }
    };
    let mut user_pos = vec![None; ratings.num_users()];
    for (new, &old) in users.iter().enumerate() {
        user_pos[old] = Some(new);
    }
    let mut item_pos = vec![None; ratings.num_items()];
    for (new, &old) in items.iter().enumerate() {
        item_pos[old] = Some(new);
    }
    let entries = ratings
        .entries()
        .iter()
        .filter_map(|e| {
            Some(Rating {
                user: user_pos[e.user]?,
                item: item_pos[e.item]?,
                value: e.value,
            })
        })
        .collect();
    Ok(Dataset {
        ratings: RatingMatrix::new(num_users, num_items, ratings.scale(), entries)?,
        ids: IdMap {
            users: users.iter().map(|&u| data.ids.users[u]).collect(),
            items: items.iter().map(|&m| data.ids.items[m]).collect(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub rank: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Probability that a cell is observed.
    pub density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 40,
            num_items: 60,
            rank: 5,
            noise: 0.0,
            density: 1.0,
            seed: 0,
        }
    }
}

/// Synthetic ratings `X = P Q^T + noise` with standard normal factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// Noise-free low-rank matrix.
    pub truth: DMatrix<f64>,
    /// Observed (noisy) cells.
    pub ratings: RatingMatrix,
}

pub fn synthesize(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.num_users == 0 || cfg.num_items == 0 || cfg.rank == 0 {
        return Err(Error::Config(
            "synthetic data needs positive users, items and rank".into(),
        ));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config(format!("noise must be nonnegative, got {}", cfg.noise)));
    }
    if !(cfg.density > 0.0 && cfg.density <= 1.0) {
        return Err(Error::Config(format!("density must be in (0, 1], got {}", cfg.density)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let p = normal(cfg.num_users, cfg.rank);
    let q = normal(cfg.num_items, cfg.rank);
    let truth = &p * q.transpose();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut observed = truth.clone();
    let mut mask = DMatrix::from_element(cfg.num_users, cfg.num_items, false);
    for u in 0..cfg.num_users {
        for m in 0..cfg.num_items {
            let noise: f64 = rng.sample(StandardNormal);
            observed[(u, m)] += cfg.noise * noise;
            mask[(u, m)] = cfg.density >= 1.0 || rng.random::<f64>() < cfg.density;
        }
    }
    let ratings = RatingMatrix::from_dense_masked(&observed, |u, m| mask[(u, m)])?;
    Ok(SynthData { truth, ratings })
}
