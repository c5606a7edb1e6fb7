//! Sparse rating matrices over dense user/item indices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed rating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

/// Closed interval the ratings are declared to live in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: f64,
    pub max: f64,
}

impl RatingScale {
    pub const FIVE_STAR: RatingScale = RatingScale { min: 1.0, max: 5.0 };

    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min <= max) {
            return Err(Error::InvalidInput(format!("invalid rating scale [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    /// Smallest scale covering every value; `None` for an empty iterator.
    pub fn covering(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        values.into_iter().fold(None, |acc, v| match acc {
            None => Some(Self { min: v, max: v }),
            Some(s) => Some(Self {
                min: s.min.min(v),
                max: s.max.max(v),
            }),
        })
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.min && value <= self.max
    }
}

/// Observed entries of a `num_users × num_items` rating matrix.
///
/// Entries are kept sorted by `(user, item)` and are unique per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingMatrix {
    num_users: usize,
    num_items: usize,
    scale: RatingScale,
    entries: Vec<Rating>,
}

impl RatingMatrix {
    pub fn new(num_users: usize, num_items: usize, scale: RatingScale, mut entries: Vec<Rating>) -> Result<Self> {
        for e in &entries {
            if e.user >= num_users {
                return Err(Error::IndexOutOfRange {
                    what: "user",
                    index: e.user,
                    size: num_users,
                });
            }
            if e.item >= num_items {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: e.item,
                    size: num_items,
                });
            }
            if !e.value.is_finite() || !scale.contains(e.value) {
                return Err(Error::InvalidInput(format!(
                    "rating {} of user {} for item {} outside scale [{}, {}]",
                    e.value, e.user, e.item, scale.min, scale.max
                )));
            }
        }
        entries.sort_by_key(|e| (e.user, e.item));
        if let Some(w) = entries
            .windows(2)
            .find(|w| (w[0].user, w[0].item) == (w[1].user, w[1].item))
        {
            return Err(Error::InvalidInput(format!(
                "duplicate rating for user {} and item {}",
                w[0].user, w[0].item
            )));
        }
        Ok(Self {
            num_users,
            num_items,
            scale,
            entries,
        })
    }

    /// Every cell of `matrix` observed, with the scale fitted to its range.
    pub fn from_dense(matrix: &DMatrix<f64>) -> Result<Self> {
        Self::from_dense_masked(matrix, |_, _| true)
    }

    /// Cells of `matrix` for which `observed(user, item)` holds.
    pub fn from_dense_masked(matrix: &DMatrix<f64>, mut observed: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut entries = Vec::new();
        for user in 0..matrix.nrows() {
            for item in 0..matrix.ncols() {
                if observed(user, item) {
                    entries.push(Rating {
                        user,
                        item,
                        value: matrix[(user, item)],
                    });
                }
            }
        }
        let scale = RatingScale::covering(entries.iter().map(|e| e.value)).unwrap_or(RatingScale::FIVE_STAR);
        Self::new(matrix.nrows(), matrix.ncols(), scale, entries)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn scale(&self) -> RatingScale {
        self.scale
    }

    pub fn entries(&self) -> &[Rating] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, user: usize, item: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&(user, item), |e| (e.user, e.item))
            .ok()
            .map(|i| self.entries[i].value)
    }

    /// `(item, rating)` lists per user, items ascending.
    pub fn by_user(&self) -> Vec<Vec<(usize, f64)>> {
        let mut rows = vec![Vec::new(); self.num_users];
        for e in &self.entries {
            rows[e.user].push((e.item, e.value));
        }
        rows
    }

    /// `(user, rating)` lists per item, users ascending.
    pub fn by_item(&self) -> Vec<Vec<(usize, f64)>> {
        let mut cols = vec![Vec::new(); self.num_items];
        for e in &self.entries {
            cols[e.item].push((e.user, e.value));
        }
        cols
    }

    /// Dense copy with `fill` in unobserved cells.
    pub fn to_dense(&self, fill: f64) -> DMatrix<f64> {
        let mut m = DMatrix::from_element(self.num_users, self.num_items, fill);
        for e in &self.entries {
            m[(e.user, e.item)] = e.value;
        }
        m
    }

    pub fn mask(&self) -> DMatrix<bool> {
        let mut m = DMatrix::from_element(self.num_users, self.num_items, false);
        for e in &self.entries {
            m[(e.user, e.item)] = true;
        }
        m
    }

    pub fn global_mean(&self) -> Option<f64> {
        if self.entries.is_empty() {
            None
        } else {
            Some(self.entries.iter().map(|e| e.value).sum::<f64>() / self.entries.len() as f64)
        }
    }

    /// Mean rating of every item, `None` for items nobody rated.
    pub fn item_means(&self) -> Vec<Option<f64>> {
        self.by_item()
            .into_iter()
            .map(|col| {
                if col.is_empty() {
                    None
                } else {
                    Some(col.iter().map(|&(_, v)| v).sum::<f64>() / col.len() as f64)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(user: usize, item: usize, value: f64) -> Rating {
        Rating { user, item, value }
    }

    #[test]
    fn rejects_duplicate_cells() {
        let err = RatingMatrix::new(2, 2, RatingScale::FIVE_STAR, vec![r(0, 1, 3.0), r(0, 1, 4.0)]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(matches!(
            RatingMatrix::new(2, 2, RatingScale::FIVE_STAR, vec![r(2, 0, 3.0)]),
            Err(Error::IndexOutOfRange { what: "user", .. })
        ));
        assert!(RatingMatrix::new(2, 2, RatingScale::FIVE_STAR, vec![r(0, 0, 6.0)]).is_err());
    }

    #[test]
    fn lookup_and_means() {
        let m = RatingMatrix::new(
            2,
            3,
            RatingScale::FIVE_STAR,
            vec![r(1, 0, 2.0), r(0, 0, 4.0), r(0, 2, 5.0)],
        )
        .unwrap();
        assert_eq!(m.get(0, 0), Some(4.0));
        assert_eq!(m.get(1, 1), None);
        assert_eq!(m.item_means(), vec![Some(3.0), None, Some(5.0)]);
        assert_eq!(m.global_mean(), Some(11.0 / 3.0));
        assert_eq!(m.entries()[0], r(0, 0, 4.0));
    }
}
