use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An (attribute index, object index) composition. Serializes as `[i, j]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair(pub usize, pub usize);

impl Pair {
    pub fn attr(self) -> usize {
        self.0
    }

    pub fn obj(self) -> usize {
        self.1
    }

    /// Attribute-major flat index `i·n_objs + j`.
    pub fn flat(self, n_objs: usize) -> usize {
        self.0 * n_objs + self.1
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.0, self.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Closed,
    Open,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "closed" => Ok(Mode::Closed),
            "open" => Ok(Mode::Open),
            other => Err(format!("unknown mode `{other}` (expected closed or open)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Closed => "closed",
            Mode::Open => "open",
        })
    }
}

/// Primitive vocabularies plus the seen/unseen composition split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionSpace {
    attributes: Vec<String>,
    objects: Vec<String>,
    seen: Vec<Pair>,
    unseen: Vec<Pair>,
}

impl CompositionSpace {
    pub fn new(attributes: Vec<String>, objects: Vec<String>, seen: Vec<Pair>, unseen: Vec<Pair>) -> Result<Self> {
        if attributes.is_empty() || objects.is_empty() {
            return Err(Error::Format("space needs at least one attribute and object".into()));
        }
        if seen.is_empty() {
            return Err(Error::Format("space has no seen compositions".into()));
        }
        let mut all = HashSet::new();
        for (kind, list) in [("seen", &seen), ("unseen", &unseen)] {
            for &p in list.iter() {
                if p.0 >= attributes.len() || p.1 >= objects.len() {
                    return Err(Error::Format(format!(
                        "{kind} pair {p} out of range for {} attributes x {} objects",
                        attributes.len(),
                        objects.len()
                    )));
                }
                if !all.insert(p) {
                    return Err(Error::Format(format!("pair {p} listed twice")));
                }
            }
        }
        Ok(CompositionSpace {
            attributes,
            objects,
            seen,
            unseen,
        })
    }

    /// Space with generated names `attr_00`, `obj_00`, ...
    pub fn with_counts(n_attrs: usize, n_objs: usize, seen: Vec<Pair>, unseen: Vec<Pair>) -> Result<Self> {
        CompositionSpace::new(
            (0..n_attrs).map(|i| format!("attr_{i:02}")).collect(),
            (0..n_objs).map(|j| format!("obj_{j:02}")).collect(),
            seen,
            unseen,
        )
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn seen(&self) -> &[Pair] {
        &self.seen
    }

    pub fn unseen(&self) -> &[Pair] {
        &self.unseen
    }

    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_objs(&self) -> usize {
        self.objects.len()
    }

    pub fn is_seen(&self, p: Pair) -> bool {
        self.seen.contains(&p)
    }

    pub fn contains(&self, p: Pair) -> bool {
        p.0 < self.n_attrs() && p.1 < self.n_objs()
    }

    pub fn prediction_space(&self, mode: Mode) -> PredictionSpace {
        build_prediction_space(self, mode)
    }
}

/// Ordered candidate set with its unseen mask and flat-index lookup.
#[derive(Debug, Clone)]
pub struct PredictionSpace {
    pub mode: Mode,
    pub pairs: Vec<Pair>,
    /// `true` where the candidate is not a seen composition.
    pub unseen_mask: Vec<bool>,
    n_objs: usize,
    /// Position of each flat index in `pairs`, if present.
    position: Vec<Option<usize>>,
}

impl PredictionSpace {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn position(&self, p: Pair) -> Option<usize> {
        self.position.get(p.flat(self.n_objs)).copied().flatten()
    }

    pub fn n_objs(&self) -> usize {
        self.n_objs
    }
}

pub fn build_prediction_space(space: &CompositionSpace, mode: Mode) -> PredictionSpace {
    let n_objs = space.n_objs();
    let pairs: Vec<Pair> = match mode {
        Mode::Closed => space.seen.iter().chain(&space.unseen).copied().collect(),
        Mode::Open => (0..space.n_attrs())
            .flat_map(|i| (0..n_objs).map(move |j| Pair(i, j)))
            .collect(),
    };
    let seen: HashSet<Pair> = space.seen.iter().copied().collect();
    let unseen_mask = pairs.iter().map(|p| !seen.contains(p)).collect();
    let mut position = vec![None; space.n_attrs() * n_objs];
    for (k, p) in pairs.iter().enumerate() {
        position[p.flat(n_objs)] = Some(k);
    }
    PredictionSpace {
        mode,
        pairs,
        unseen_mask,
        n_objs,
        position,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space23() -> CompositionSpace {
        CompositionSpace::with_counts(
            2,
            3,
            vec![Pair(0, 0), Pair(1, 1), Pair(0, 2), Pair(1, 0)],
            vec![Pair(1, 2), Pair(0, 1)],
        )
        .unwrap()
    }

    #[test]
    fn open_world_is_attribute_major() {
        let ps = space23().prediction_space(Mode::Open);
        assert_eq!(ps.len(), 6);
        let flat: Vec<usize> = ps.pairs.iter().map(|p| p.flat(3)).collect();
        assert_eq!(flat, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(ps.pairs[4], Pair(1, 1));
    }

    #[test]
    fn closed_world_puts_seen_first() {
        let s = space23();
        let ps = s.prediction_space(Mode::Closed);
        assert_eq!(ps.len(), 6);
        assert_eq!(&ps.pairs[..4], s.seen());
        assert_eq!(ps.unseen_mask, vec![false, false, false, false, true, true]);
        assert_eq!(ps.position(Pair(0, 1)), Some(5));
    }

    #[test]
    fn closed_subset_of_open() {
        let mut s = space23();
        s.unseen.pop();
        let closed = s.prediction_space(Mode::Closed);
        let open = s.prediction_space(Mode::Open);
        assert_eq!(closed.len(), 5);
        assert!(closed.pairs.iter().all(|p| open.position(*p).is_some()));
        assert_eq!(open.position(Pair(0, 1)).map(|k| open.unseen_mask[k]), Some(true));
        assert_eq!(closed.position(Pair(0, 1)), None);
    }

    #[test]
    fn rejects_overlap_and_range() {
        assert!(CompositionSpace::with_counts(2, 2, vec![Pair(0, 0)], vec![Pair(0, 0)]).is_err());
        assert!(CompositionSpace::with_counts(2, 2, vec![Pair(0, 2)], vec![]).is_err());
        assert!(CompositionSpace::with_counts(2, 2, vec![], vec![Pair(0, 1)]).is_err());
    }

    #[test]
    fn pair_serializes_as_array() {
        assert_eq!(serde_json::to_string(&Pair(3, 1)).unwrap(), "[3,1]");
    }
}
