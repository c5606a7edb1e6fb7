//! One-bit comparison data: item-item preferences per user and user-user
//! inclinations per item.
//!
//! On-disk layout is plain text. The first line holds `num_users num_items`,
//! followed by one triple per line, sorted:
//!
//! ```text
//! 2 2
//! I 0 0 1
//! I 1 1 0
//! U 0 0 1
//! U 1 1 0
//! ```
//!
//! `I u k l` reads "user `u` prefers item `k` over item `l`" and `U m i j`
//! reads "user `i` is more inclined toward item `m` than user `j`".

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, RelationKind, Result};
use crate::ratings::RatingMatrix;

/// `preferred >_user other`
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemComparison {
    pub user: usize,
    pub preferred: usize,
    pub other: usize,
}

/// `stronger >_item weaker`
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserComparison {
    pub item: usize,
    pub stronger: usize,
    pub weaker: usize,
}

/// A comparison of either kind, as pooled for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    Item(ItemComparison),
    User(UserComparison),
}

impl From<ItemComparison> for Comparison {
    fn from(c: ItemComparison) -> Self {
        Comparison::Item(c)
    }
}

impl From<UserComparison> for Comparison {
    fn from(c: UserComparison) -> Self {
        Comparison::User(c)
    }
}

/// Both comparison relations over a fixed user/item universe.
///
/// Triples are held in sorted order, so two sets holding the same triples
/// compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonSet {
    num_users: usize,
    num_items: usize,
    item_comparisons: Vec<ItemComparison>,
    user_comparisons: Vec<UserComparison>,
}

fn check_index(what: &'static str, index: usize, size: usize) -> Result<()> {
    if index >= size {
        Err(Error::IndexOutOfRange { what, index, size })
    } else {
        Ok(())
    }
}

impl ComparisonSet {
    /// Validates indices and rejects self-comparisons and duplicate triples.
    ///
    /// Antisymmetry is not checked here; see [`ComparisonSet::check_antisymmetry`].
    pub fn new(
        num_users: usize,
        num_items: usize,
        mut item_comparisons: Vec<ItemComparison>,
        mut user_comparisons: Vec<UserComparison>,
    ) -> Result<Self> {
        for c in &item_comparisons {
            check_index("user", c.user, num_users)?;
            check_index("item", c.preferred, num_items)?;
            check_index("item", c.other, num_items)?;
            if c.preferred == c.other {
                return Err(Error::InvalidInput(format!(
                    "user {} compares item {} with itself",
                    c.user, c.preferred
                )));
            }
        }
        for c in &user_comparisons {
            check_index("item", c.item, num_items)?;
            check_index("user", c.stronger, num_users)?;
            check_index("user", c.weaker, num_users)?;
            if c.stronger == c.weaker {
                return Err(Error::InvalidInput(format!(
                    "item {} compares user {} with itself",
                    c.item, c.stronger
                )));
            }
        }
        item_comparisons.sort_unstable();
        user_comparisons.sort_unstable();
        if let Some(w) = item_comparisons.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!("duplicate item comparison {:?}", w[0])));
        }
        if let Some(w) = user_comparisons.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!("duplicate user comparison {:?}", w[0])));
        }
        Ok(Self {
            num_users,
            num_items,
            item_comparisons,
            user_comparisons,
        })
    }

    pub fn empty(num_users: usize, num_items: usize) -> Self {
        Self {
            num_users,
            num_items,
            item_comparisons: Vec::new(),
            user_comparisons: Vec::new(),
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn item_comparisons(&self) -> &[ItemComparison] {
        &self.item_comparisons
    }

    pub fn user_comparisons(&self) -> &[UserComparison] {
        &self.user_comparisons
    }

    /// Total number of triples of both kinds.
    pub fn len(&self) -> usize {
        self.item_comparisons.len() + self.user_comparisons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Item comparisons first, then user comparisons.
    pub fn pooled(&self) -> Vec<Comparison> {
        self.item_comparisons
            .iter()
            .copied()
            .map(Comparison::from)
            .chain(self.user_comparisons.iter().copied().map(Comparison::from))
            .collect()
    }

    /// Fails if some triple is present in both orientations.
    pub fn check_antisymmetry(&self) -> Result<()> {
        let items: HashSet<_> = self.item_comparisons.iter().collect();
        for c in &self.item_comparisons {
            let flipped = ItemComparison {
                user: c.user,
                preferred: c.other,
                other: c.preferred,
            };
            if items.contains(&flipped) {
                return Err(Error::InvalidInput(format!(
                    "user {} prefers items {} and {} over each other",
                    c.user, c.preferred, c.other
                )));
            }
        }
        let users: HashSet<_> = self.user_comparisons.iter().collect();
        for c in &self.user_comparisons {
            let flipped = UserComparison {
                item: c.item,
                stronger: c.weaker,
                weaker: c.stronger,
            };
            if users.contains(&flipped) {
                return Err(Error::InvalidInput(format!(
                    "users {} and {} are each more inclined toward item {} than the other",
                    c.stronger, c.weaker, c.item
                )));
            }
        }
        Ok(())
    }
}

/// Derives both relations from the ordering of observed ratings.
///
/// Equal ratings carry no preference and emit nothing. With `expand`, the
/// result is additionally transitively closed.
pub fn extract_comparisons(ratings: &RatingMatrix, expand: bool) -> Result<ComparisonSet> {
    let mut item_comparisons = Vec::new();
    for (user, row) in ratings.by_user().iter().enumerate() {
        for (a, &(k, rk)) in row.iter().enumerate() {
            for &(l, rl) in &row[a + 1..] {
                if rk > rl {
                    item_comparisons.push(ItemComparison {
                        user,
                        preferred: k,
                        other: l,
                    });
                } else if rl > rk {
                    item_comparisons.push(ItemComparison {
                        user,
                        preferred: l,
                        other: k,
                    });
                }
            }
        }
    }
    let mut user_comparisons = Vec::new();
    for (item, col) in ratings.by_item().iter().enumerate() {
        for (a, &(i, ri)) in col.iter().enumerate() {
            for &(j, rj) in &col[a + 1..] {
                if ri > rj {
                    user_comparisons.push(UserComparison {
                        item,
                        stronger: i,
                        weaker: j,
                    });
                } else if rj > ri {
                    user_comparisons.push(UserComparison {
                        item,
                        stronger: j,
                        weaker: i,
                    });
                }
            }
        }
    }
    let set = ComparisonSet::new(
        ratings.num_users(),
        ratings.num_items(),
        item_comparisons,
        user_comparisons,
    )?;
    if expand {
        transitive_closure(&set)
    } else {
        Ok(set)
    }
}

/// Closes one relation per owner. `edges` are `(owner, winner, loser)` and
/// must be sorted by owner.
fn close_relation(
    kind: RelationKind,
    domain: usize,
    edges: &[(usize, usize, usize)],
) -> Result<Vec<(usize, usize, usize)>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < edges.len() {
        let owner = edges[start].0;
        let end = start + edges[start..].iter().take_while(|e| e.0 == owner).count();

        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); domain];
        for &(_, a, b) in &edges[start..end] {
            adj[a].push(b);
        }
        if let Some(cycle) = find_cycle(&adj) {
            return Err(Error::Cycle { kind, owner, cycle });
        }
        let mut seen = vec![usize::MAX; domain];
        let mut stack = Vec::new();
        for src in 0..domain {
            if adj[src].is_empty() {
                continue;
            }
            stack.extend_from_slice(&adj[src]);
            while let Some(v) = stack.pop() {
                if seen[v] == src {
                    continue;
                }
                seen[v] = src;
                out.push((owner, src, v));
                stack.extend_from_slice(&adj[v]);
            }
        }
        start = end;
    }
    Ok(out)
}

/// Iterative three-colour DFS. Returns a cycle as its node sequence, with the
/// first node repeated at the end.
fn find_cycle(adj: &[Vec<usize>]) -> Option<Vec<usize>> {
    const WHITE: u8 = 0;
    const GREY: u8 = 1;
    const BLACK: u8 = 2;
    let mut colour = vec![WHITE; adj.len()];
    let mut path: Vec<(usize, usize)> = Vec::new();
    for root in 0..adj.len() {
        if colour[root] != WHITE || adj[root].is_empty() {
            continue;
        }
        colour[root] = GREY;
        path.push((root, 0));
        while let Some(top) = path.last_mut() {
            let node = top.0;
            if top.1 < adj[node].len() {
                let child = adj[node][top.1];
                top.1 += 1;
                match colour[child] {
                    WHITE => {
                        colour[child] = GREY;
                        path.push((child, 0));
                    }
                    GREY => {
                        let pos = path.iter().position(|&(n, _)| n == child).unwrap();
                        let mut cycle: Vec<usize> = path[pos..].iter().map(|&(n, _)| n).collect();
                        cycle.push(child);
                        return Some(cycle);
                    }
                    _ => {}
                }
            } else {
                colour[node] = BLACK;
                path.pop();
            }
        }
    }
    None
}

/// Transitive closure of every per-user item relation and every per-item user
/// relation. Rejects relations containing a cycle.
pub fn transitive_closure(set: &ComparisonSet) -> Result<ComparisonSet> {
    let item_edges: Vec<_> = set
        .item_comparisons
        .iter()
        .map(|c| (c.user, c.preferred, c.other))
        .collect();
    let user_edges: Vec<_> = set
        .user_comparisons
        .iter()
        .map(|c| (c.item, c.stronger, c.weaker))
        .collect();
    let items = close_relation(RelationKind::Item, set.num_items, &item_edges)?
        .into_iter()
        .map(|(user, preferred, other)| ItemComparison { user, preferred, other })
        .collect();
    let users = close_relation(RelationKind::User, set.num_users, &user_edges)?
        .into_iter()
        .map(|(item, stronger, weaker)| UserComparison { item, stronger, weaker })
        .collect();
    ComparisonSet::new(set.num_users, set.num_items, items, users)
}

pub fn write_comparisons<W: Write>(set: &ComparisonSet, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{} {}", set.num_users, set.num_items)?;
    for c in &set.item_comparisons {
        writeln!(out, "I {} {} {}", c.user, c.preferred, c.other)?;
    }
    for c in &set.user_comparisons {
        writeln!(out, "U {} {} {}", c.item, c.stronger, c.weaker)?;
    }
    out.flush()
}

pub fn store_comparisons(set: &ComparisonSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_comparisons(set, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Parses the text format. `origin` names the source in error messages.
pub fn read_comparisons<R: BufRead>(input: R, origin: &Path) -> Result<ComparisonSet> {
    let mut header: Option<(usize, usize)> = None;
    let mut items = Vec::new();
    let mut users = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::parse(origin, lineno, format!("`{s}` is not an index")))
        };
        match header {
            None => {
                if fields.len() != 2 {
                    return Err(Error::parse(origin, lineno, "expected header `num_users num_items`"));
                }
                header = Some((num(fields[0])?, num(fields[1])?));
            }
            Some(_) => {
                if fields.len() != 4 {
                    return Err(Error::parse(origin, lineno, "expected `I u k l` or `U m i j`"));
                }
                let (a, b, c) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
                match fields[0] {
                    "I" => items.push(ItemComparison {
                        user: a,
                        preferred: b,
                        other: c,
                    }),
                    "U" => users.push(UserComparison {
                        item: a,
                        stronger: b,
                        weaker: c,
                    }),
                    tag => return Err(Error::parse(origin, lineno, format!("unknown record tag `{tag}`"))),
                }
            }
        }
    }
    let (num_users, num_items) =
        header.ok_or_else(|| Error::parse(origin, 1, "missing header `num_users num_items`"))?;
    let set = ComparisonSet::new(num_users, num_items, items, users)?;
    set.check_antisymmetry()?;
    Ok(set)
}

pub fn load_comparisons(path: impl AsRef<Path>) -> Result<ComparisonSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_comparisons(BufReader::new(file), path)
}
